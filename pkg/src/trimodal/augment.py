"""Masking and mixing augmentation over tri-modal batches.

A batch is a dict holding ``label`` (int array ``[N]``) and any subset of the
modality arrays ``audio``, ``face``, ``road`` (leading axis ``N``).  Every op
returns a new batch and never touches the labels.  Draws are appended to an
optional ``log`` list as ``sample_idx<TAB>modality<TAB>op<TAB>params`` lines.
"""
from dataclasses import dataclass, fields

import numpy as np

from .errors import InvalidArgument

MODALITY_KEYS = ("audio", "face", "road")


@dataclass
class AugmentConfig:
    p_zero: float = 0.15
    p_mix: float = 0.3
    mix_low: float = 0.3
    mix_high: float = 0.7
    copies: int = 1

    def __post_init__(self):
        if not (0 <= self.p_zero <= 1 and 0 <= self.p_mix <= 1):
            raise InvalidArgument("augmentation probabilities must lie in [0, 1]")
        if not 0 < self.mix_low <= self.mix_high < 1:
            raise InvalidArgument("mixing coefficients must lie inside (0, 1)")
        if self.copies < 0:
            raise InvalidArgument("copies must be non-negative")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown augment config key {sorted(unknown)[0]!r}")
        return cls(**d)


def _modalities(batch):
    return [k for k in MODALITY_KEYS if batch.get(k) is not None]


def _copy(batch):
    return {k: (np.array(v, copy=True) if v is not None else None) for k, v in batch.items()}


def batch_size(batch):
    return len(batch["label"])


def mix_modalities(batch, rng, cfg, log=None, alpha=None):
    """Blend samples with same-label partners.

    For each sample and modality, with probability ``p_mix``:
    ``x[n] <- a * x[n] + (1 - a) * x[partner(n)]`` with ``a ~ U(mix_low,
    mix_high)`` (or the fixed ``alpha``) and ``partner`` drawn from a random
    permutation of the sample's own class.  Partners read the unmixed batch.
    """
    labels = np.asarray(batch["label"])
    n = len(labels)
    if n < 2:
        raise InvalidArgument("mixing needs a batch of at least two samples")
    out = _copy(batch)
    for key in _modalities(batch):
        src = np.asarray(batch[key])
        partner = np.arange(n)
        for label in np.unique(labels):
            members = np.flatnonzero(labels == label)
            if len(members) > 1:
                partner[members] = members[rng.permutation(len(members))]
        chosen = rng.random(n) < cfg.p_mix
        coef = rng.uniform(cfg.mix_low, cfg.mix_high, n) if alpha is None else np.full(n, float(alpha))
        for i in np.flatnonzero(chosen):
            j = partner[i]
            if j == i:
                continue
            a = coef[i]
            out[key][i] = (a * src[i] + (1 - a) * src[j]).astype(src.dtype)
            if log is not None:
                log.append(f"{i}\t{key}\tmix\talpha={float(a)!r},partner={int(j)}")
    return out


def zero_mask(batch, rng, cfg, log=None):
    """Zero whole modalities with probability ``p_zero`` each.

    A sample that would lose every modality that was nonzero on input gets
    one of those back, chosen uniformly.
    """
    keys = _modalities(batch)
    out = _copy(batch)
    n = batch_size(batch)
    if not keys:
        return out
    drop = rng.random((n, len(keys))) < cfg.p_zero
    restore = rng.integers(0, len(keys), n)
    for i in range(n):
        alive = [m for m, k in enumerate(keys) if np.any(batch[k][i])]
        if alive and drop[i, alive].all():
            drop[i, alive[restore[i] % len(alive)]] = False
        for m, key in enumerate(keys):
            if drop[i, m]:
                out[key][i] = 0
                if log is not None:
                    log.append(f"{i}\t{key}\tzero\t")
    return out


def take(batch, index):
    return {k: (np.asarray(v)[index] if v is not None else None) for k, v in batch.items()}


def concat_batches(batches):
    keys = batches[0].keys()
    return {k: (np.concatenate([b[k] for b in batches]) if batches[0][k] is not None else None)
            for k in keys}


def compose_batch(clean, rng, cfg, log=None):
    """Clean batch plus ``copies`` mixed-then-masked copies, in shuffled order."""
    parts = [clean]
    for c in range(cfg.copies):
        copy_log = [] if log is not None else None
        aug = mix_modalities(clean, rng, cfg, copy_log) if batch_size(clean) >= 2 else _copy(clean)
        aug = zero_mask(aug, rng, cfg, copy_log)
        if log is not None:
            offset = (c + 1) * batch_size(clean)
            for line in copy_log:
                idx, rest = line.split("\t", 1)
                log.append(f"{int(idx) + offset}\t{rest}")
        parts.append(aug)
    merged = concat_batches(parts)
    order = rng.permutation(batch_size(merged))
    if log is not None:
        log.append(f"-1\t*\tpermute\t{','.join(map(str, order))}")
    return take(merged, order)
