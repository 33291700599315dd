"""Tri-modal hazard network.

Three branches (driver audio ``A``, driver face video ``V``, road video
``R``) produce per-timestep feature sequences after their second stage.  Each
active pair of modalities exchanges attention scores that re-weight the
timesteps of the other, after which every branch is pooled and a joint linear
head emits two logits (safe, dangerous).
"""
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tmf
from .diffcore import (BatchNormState, Param, add, batchnorm, channel_shuffle, concat, conv1d,
                       conv2d, dropout, global_avg_pool, linear, matmul, maxpool1d, mean, mul,
                       relu, reshape, scale, sigmoid, softmax, transpose)
from .diffcore.autograd import as_node
from .errors import CheckpointIncompatible, InvalidArgument

MODALITIES = ("A", "V", "R")
INPUT_KEYS = {"A": "audio", "V": "face", "R": "road"}
# reporting order: all three, the pairs, then single modalities
ABLATION_MASKS = ("A-V-R", "A-V", "A-R", "V-R", "A", "V", "R")


def parse_mask(mask):
    """Normalize ``"A-V"``, ``"AV"``, ``{"A", "V"}`` ... to a sorted tuple of letters."""
    if isinstance(mask, str):
        letters = [ch for ch in mask.upper() if ch not in "-_, +"]
    else:
        letters = [str(m).upper() for m in mask]
    bad = [m for m in letters if m not in MODALITIES]
    if bad:
        raise InvalidArgument(f"unknown modality {bad[0]!r}; expected a subset of A, V, R")
    if not letters:
        raise InvalidArgument("ablation mask must select at least one modality")
    return tuple(m for m in MODALITIES if m in letters)


def mask_name(mask):
    return "-".join(parse_mask(mask))


@dataclass
class ModelConfig:
    frame_channels: int = 3
    n_mfcc: int = 13
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    block_channels: tuple = (32, 32)
    block_strides: tuple = (2, 1)
    expansion: int = 2
    stage2_channels: int = 64
    stage3_channels: int = 128
    audio_channels: tuple = (64, 128, 256, 128)
    audio_pool: int = 2
    kernel: int = 3
    latent_dim: int = 64
    shuffle_groups: int = 4
    dropout: float = 0.2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    n_classes: int = 2

    def __post_init__(self):
        self.block_channels = tuple(self.block_channels)
        self.block_strides = tuple(self.block_strides)
        self.audio_channels = tuple(self.audio_channels)
        widths = (self.frame_channels, self.n_mfcc, self.stem_channels, self.expansion,
                  self.stage2_channels, self.stage3_channels, self.latent_dim,
                  *self.block_channels, *self.audio_channels)
        if any(int(v) < 1 for v in widths):
            raise InvalidArgument("all model widths must be positive")
        if len(self.audio_channels) != 4:
            raise InvalidArgument("the audio branch has exactly four conv blocks")
        if len(self.block_channels) != len(self.block_strides) or not self.block_channels:
            raise InvalidArgument("block_channels and block_strides must be equally long")
        for c in (self.stem_channels, *self.block_channels):
            if (c * self.expansion) % self.shuffle_groups:
                raise InvalidArgument(
                    f"expanded width {c * self.expansion} not divisible by "
                    f"shuffle_groups={self.shuffle_groups}")
        if not 0 <= self.dropout < 1:
            raise InvalidArgument("dropout must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown model config key {sorted(unknown)[0]!r}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def feature_width(self, modality):
        """Width of the sequence the fusion stage sees for ``modality``."""
        return self.audio_channels[-1] if modality == "A" else self.stage2_channels

    def pooled_width(self, modality):
        return self.audio_channels[-1] if modality == "A" else self.stage3_channels


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class TriModalNet:
    """Parameters, batch-norm statistics and forward pass for one ablation mask."""

    def __init__(self, config, mask="A-V-R", rng=None, dtype=np.float32):
        self.config = config
        self.mask = parse_mask(mask)
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.bn = {}
        self.input_stats = {}
        if rng is None:
            rng = np.random.default_rng(0)
        self._build(rng)

    # -- construction ----------------------------------------------------------

    def _param(self, name, value):
        if name in self.params:
            raise InvalidArgument(f"duplicate parameter name {name}")
        self.params[name] = Param(name, np.asarray(value, dtype=self.dtype))

    def _bn(self, name, channels):
        self._param(f"{name}.gamma", np.ones(channels))
        self._param(f"{name}.beta", np.zeros(channels))
        self.bn[name] = BatchNormState.fresh(channels, self.dtype)

    def _conv1d(self, name, c_in, c_out, rng):
        k = self.config.kernel
        self._param(f"{name}.w", _he(rng, (c_out, c_in, k), c_in * k, self.dtype))
        self._param(f"{name}.b", np.zeros(c_out))
        self._bn(f"{name}.bn", c_out)

    def _build(self, rng):
        cfg = self.config
        for m in self.mask:
            if m == "A":
                c_in = cfg.n_mfcc
                for i, c_out in enumerate(cfg.audio_channels):
                    self._conv1d(f"audio.conv{i}", c_in, c_out, rng)
                    c_in = c_out
            else:
                prefix = "face" if m == "V" else "road"
                self._build_extractor(prefix, "road" if m == "R" else "face", rng)
                c_in = cfg.block_channels[-1]
                for i in range(2):
                    self._conv1d(f"{prefix}.stage2.conv{i}", c_in, cfg.stage2_channels, rng)
                    c_in = cfg.stage2_channels
                for i in range(2):
                    self._conv1d(f"{prefix}.stage3.conv{i}", c_in, cfg.stage3_channels, rng)
                    c_in = cfg.stage3_channels
        for i in self.mask:
            for j in self.mask:
                if i == j:
                    continue
                # queries from i, keys from j
                self._param(f"fusion.{i}{j}.wq", rng.standard_normal(
                    (cfg.feature_width(i), cfg.latent_dim)) / np.sqrt(cfg.feature_width(i)))
                self._param(f"fusion.{i}{j}.wk", rng.standard_normal(
                    (cfg.feature_width(j), cfg.latent_dim)) / np.sqrt(cfg.feature_width(j)))
        width = sum(cfg.pooled_width(m) for m in self.mask)
        limit = np.sqrt(6.0 / (width + cfg.n_classes))
        self._param("head.w", rng.uniform(-limit, limit, (width, cfg.n_classes)))
        self._param("head.b", np.zeros(cfg.n_classes))

    def _build_extractor(self, prefix, variant, rng):
        cfg = self.config
        c_in = cfg.frame_channels
        k = cfg.stem_kernel
        self._param(f"{prefix}.stem.w",
                    _he(rng, (cfg.stem_channels, c_in, k, k), c_in * k * k, self.dtype))
        self._bn(f"{prefix}.stem.bn", cfg.stem_channels)
        c = cfg.stem_channels
        for b, c_out in enumerate(cfg.block_channels):
            name = f"{prefix}.block{b}"
            e = c * cfg.expansion
            self._param(f"{name}.expand.w", _he(rng, (e, c, 1, 1), c, self.dtype))
            self._bn(f"{name}.expand.bn", e)
            self._param(f"{name}.dw.w", _he(rng, (e, 1, 3, 3), 9, self.dtype))
            self._bn(f"{name}.dw.bn", e)
            self._param(f"{name}.compress.w", _he(rng, (c_out, e, 1, 1), e, self.dtype))
            self._bn(f"{name}.compress.bn", c_out)
            if variant == "road":
                self._param(f"{name}.gate_c.w", np.zeros((c_out, c_out)))
                self._param(f"{name}.gate_c.b", np.zeros(c_out))
                self._param(f"{name}.gate_s.w", np.zeros((1, 1, 1, 1)))
                self._param(f"{name}.gate_s.b", np.zeros(1))
            c = c_out

    # -- layers --------------------------------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _batchnorm(self, x, name, train):
        return batchnorm(x, self._p(f"{name}.gamma"), self._p(f"{name}.beta"), self.bn[name],
                         train=train, eps=self.config.bn_eps, momentum=self.config.bn_momentum)

    def _conv_block(self, x, name, train, pool=False):
        x = conv1d(x, self._p(f"{name}.w"), self._p(f"{name}.b"), stride=1,
                   padding=self.config.kernel // 2)
        x = relu(self._batchnorm(x, f"{name}.bn", train))
        if pool:
            x = maxpool1d(x, self.config.audio_pool)
        return x

    def efficient_block(self, x, name, variant, stride, train):
        """Pointwise expand, depthwise 3x3, pointwise compress; road adds shuffle and gates."""
        x = as_node(x)
        e = self._p(f"{name}.expand.w").shape[0]
        y = conv2d(x, self._p(f"{name}.expand.w"))
        y = relu(self._batchnorm(y, f"{name}.expand.bn", train))
        y = conv2d(y, self._p(f"{name}.dw.w"), stride=stride, padding=1, groups=e)
        y = self._batchnorm(y, f"{name}.dw.bn", train)
        if variant == "road":
            y = channel_shuffle(y, self.config.shuffle_groups)
        y = conv2d(y, self._p(f"{name}.compress.w"))
        y = self._batchnorm(y, f"{name}.compress.bn", train)
        if variant == "road":
            n, c = y.shape[:2]
            gc = sigmoid(linear(global_avg_pool(y), self._p(f"{name}.gate_c.w"),
                                self._p(f"{name}.gate_c.b")))
            y = mul(y, reshape(gc, (n, c, 1, 1)))
            cmean = reshape(mean(y, 1), (n, 1) + y.shape[2:])
            gs = sigmoid(conv2d(cmean, self._p(f"{name}.gate_s.w"), self._p(f"{name}.gate_s.b")))
            y = mul(y, gs)
        if y.shape == x.shape:
            y = add(y, x)
        return y

    def frame_extractor(self, frames, prefix, train):
        """``[N, F, C, H, W] -> [N, F, d]`` with one parameter set for every frame."""
        frames = as_node(frames)
        if frames.value.ndim != 5:
            raise InvalidArgument(f"{prefix} frames must be [N, F, C, H, W], got {frames.shape}")
        n, f = frames.shape[:2]
        if frames.shape[2] != self.config.frame_channels:
            raise InvalidArgument(f"{prefix} frames have {frames.shape[2]} channels, "
                                  f"model expects {self.config.frame_channels}")
        x = reshape(frames, (n * f,) + frames.shape[2:])
        cfg = self.config
        pad = (cfg.stem_kernel - cfg.stem_stride + 1) // 2
        x = conv2d(x, self._p(f"{prefix}.stem.w"), stride=cfg.stem_stride, padding=pad)
        x = relu(self._batchnorm(x, f"{prefix}.stem.bn", train))
        variant = "road" if prefix == "road" else "face"
        for b, stride in enumerate(self.config.block_strides):
            x = self.efficient_block(x, f"{prefix}.block{b}", variant, stride, train)
        x = global_avg_pool(x)
        return reshape(x, (n, f, x.shape[1]))

    def stage2(self, modality, x, train):
        """Branch up to the fusion tap; returns ``[N, T_m, d_m]``."""
        if modality == "A":
            x = as_node(x)
            if x.value.ndim != 3 or x.shape[1] != self.config.n_mfcc:
                raise InvalidArgument(f"audio input must be [N, {self.config.n_mfcc}, T], got {x.shape}")
            for i in range(4):
                if x.shape[2] < self.config.audio_pool:
                    raise InvalidArgument("audio sequence too short for the pooling stack")
                x = self._conv_block(x, f"audio.conv{i}", train, pool=True)
        else:
            prefix = "face" if modality == "V" else "road"
            x = transpose(self.frame_extractor(x, prefix, train), (0, 2, 1))
            for i in range(2):
                x = self._conv_block(x, f"{prefix}.stage2.conv{i}", train)
        return transpose(x, (0, 2, 1))

    def stage3(self, modality, phi, train):
        x = transpose(phi, (0, 2, 1))
        if modality != "A":
            prefix = "face" if modality == "V" else "road"
            for i in range(2):
                x = self._conv_block(x, f"{prefix}.stage3.conv{i}", train)
        return global_avg_pool(x)

    # -- fusion -----------------------------------------------------------------------

    def attention(self, phi_q, phi_k, query, key):
        """Row-softmax of ``(phi_q Wq)(phi_k Wk)^T / sqrt(d_lat)``: ``[N, T_q, T_k]``."""
        return pairwise_attention(phi_q, phi_k, self._p(f"fusion.{query}{key}.wq"),
                                  self._p(f"fusion.{query}{key}.wk"))

    def fusion_scores(self, phis):
        """Per modality, the list of score vectors contributed by each other modality."""
        scores = {m: [] for m in phis}
        for i in phis:
            for j in phis:
                if i != j:
                    # j queries, i provides keys: a distribution over i's timesteps
                    scores[i].append(score_aggregate(self.attention(phis[j], phis[i], j, i)))
        return scores

    def fuse(self, phis):
        scores = self.fusion_scores(phis)
        return {m: modulate(phis[m], scores[m]) for m in phis}

    # -- forward ------------------------------------------------------------------------

    def check_inputs(self, inputs):
        missing = [INPUT_KEYS[m] for m in self.mask if inputs.get(INPUT_KEYS[m]) is None]
        if missing:
            raise InvalidArgument(f"mask {mask_name(self.mask)} needs input {missing[0]!r}")
        sizes = {len(as_node(inputs[INPUT_KEYS[m]]).value) for m in self.mask}
        if len(sizes) != 1:
            raise InvalidArgument("modalities disagree on batch size")
        return sizes.pop()

    def forward(self, inputs, train=False, rng=None, fuse=True):
        """Logits ``[N, n_classes]`` for a dict of standardized input batches."""
        self.check_inputs(inputs)
        phis = {m: self.stage2(m, inputs[INPUT_KEYS[m]], train) for m in self.mask}
        if fuse and len(phis) > 1:
            phis = self.fuse(phis)
        pooled = [self.stage3(m, phis[m], train) for m in self.mask]
        h = pooled[0] if len(pooled) == 1 else concat(pooled, axis=1)
        h = dropout(h, self.config.dropout, rng=rng, train=train)
        return linear(h, self._p("head.w"), self._p("head.b"))

    __call__ = forward

    # -- state --------------------------------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        clone = TriModalNet.__new__(TriModalNet)
        clone.config, clone.mask, clone.dtype = self.config, self.mask, np.dtype(dtype)
        clone.params = {k: Param(k, p.value.astype(dtype)) for k, p in self.params.items()}
        clone.bn = {k: s.astype(dtype) for k, s in self.bn.items()}
        clone.input_stats = {k: (m.copy(), s.copy()) for k, (m, s) in self.input_stats.items()}
        return clone

    def copy(self):
        return self.astype(self.dtype)

    def fit_input_stats(self, inputs):
        """Record mean/std of the training inputs (per MFCC coefficient; scalar for video)."""
        self.input_stats = {}
        for m in self.mask:
            x = np.asarray(inputs[INPUT_KEYS[m]], dtype=np.float64)
            if m == "A":
                mu, sd = x.mean(axis=(0, 2)), x.std(axis=(0, 2))
            else:
                mu, sd = np.atleast_1d(x.mean()), np.atleast_1d(x.std())
            self.input_stats[INPUT_KEYS[m]] = (mu.astype(np.float32),
                                               np.maximum(sd, 1e-6).astype(np.float32))

    def standardize(self, inputs):
        out = dict(inputs)
        for key, (mu, sd) in self.input_stats.items():
            if out.get(key) is None:
                continue
            x = np.asarray(out[key], dtype=self.dtype)
            if key == "audio":
                out[key] = ((x - mu[None, :, None]) / sd[None, :, None]).astype(self.dtype)
            else:
                out[key] = ((x - mu[0]) / sd[0]).astype(self.dtype)
        return out

    def state_arrays(self):
        arrays = {k: p.value for k, p in self.params.items()}
        for k, s in self.bn.items():
            arrays[f"{k}.running_mean"] = s.running_mean
            arrays[f"{k}.running_var"] = s.running_var
        for k, (mu, sd) in self.input_stats.items():
            arrays[f"input.{k}.mean"] = mu
            arrays[f"input.{k}.std"] = sd
        return arrays

    def config_hash(self):
        blob = json.dumps({"model": self.config.to_dict(), "mask": list(self.mask)},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- fusion primitives (module-level so they can be tested on raw arrays) ---------------

def pairwise_attention(phi_i, phi_j, wq, wk):
    """``softmax((phi_i wq)(phi_j wk)^T / sqrt(d_lat))`` over the last axis.

    ``phi_i``: ``[..., T_i, d_i]``, ``phi_j``: ``[..., T_j, d_j]`` -> ``[..., T_i, T_j]``.
    """
    wq, wk = as_node(wq), as_node(wk)
    d_lat = wq.shape[-1]
    if d_lat < 1 or wk.shape[-1] != d_lat:
        raise InvalidArgument("query and key projections must share a positive latent width")
    q = matmul(phi_i, wq)
    k = matmul(phi_j, wk)
    ndim = k.value.ndim
    logits = matmul(q, transpose(k, tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)))
    return softmax(scale(logits, 1.0 / np.sqrt(d_lat)), axis=-1)


def score_aggregate(attn):
    """Column means of a row-stochastic ``[..., T_j, T_i]`` matrix: a distribution over ``T_i``."""
    return mean(attn, -2)


def modulate(phi, scores):
    """Scale each timestep of ``phi`` ``[..., T, d]`` by ``T * mean(scores)``.

    The gate averages to exactly 1, so uniform scores leave ``phi`` unchanged.
    With no scores (single active modality) ``phi`` is returned as is.
    """
    phi = as_node(phi)
    if not scores:
        return phi
    t = phi.shape[-2]
    gate = scores[0]
    for s in scores[1:]:
        gate = add(gate, s)
    gate = scale(gate, t / len(scores))
    return mul(phi, reshape(gate, gate.shape + (1,)))


# -- checkpoints ----------------------------------------------------------------------------

def save_checkpoint(model, directory, step=0, extra=None):
    """Manifest JSON plus one TMF1 blob per array in ``directory``."""
    os.makedirs(directory, exist_ok=True)
    arrays = model.state_arrays()
    entries = []
    for name in sorted(arrays):
        fname = name.replace("/", "_") + ".tmf"
        tmf.save(os.path.join(directory, fname), arrays[name])
        entries.append({"name": name, "shape": list(np.shape(arrays[name])), "file": fname})
    manifest = {
        "format": "trimodal-checkpoint/1",
        "mask": mask_name(model.mask),
        "model": model.config.to_dict(),
        "config_hash": model.config_hash(),
        "step": int(step),
        "batches_tracked": {k: s.batches_tracked for k, s in sorted(model.bn.items())},
        "arrays": entries,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    with open(path) as fh:
        return json.load(fh)


def load_checkpoint(directory, mask=None, config=None):
    """Rebuild a :class:`TriModalNet` from ``directory``.

    Raises :class:`CheckpointIncompatible` when ``mask`` or ``config`` is given
    and disagrees with the stored graph.
    """
    manifest = read_manifest(directory)
    stored_cfg = ModelConfig.from_dict(manifest["model"])
    if config is not None and config.to_dict() != stored_cfg.to_dict():
        raise CheckpointIncompatible("checkpoint-incompatible: model config differs from checkpoint")
    if mask is not None and parse_mask(mask) != parse_mask(manifest["mask"]):
        raise CheckpointIncompatible(
            f"checkpoint-incompatible: checkpoint was trained for mask {manifest['mask']}, "
            f"requested {mask_name(mask)}")
    model = TriModalNet(stored_cfg, manifest["mask"])
    expected = model.state_arrays()
    loaded = {}
    for entry in manifest["arrays"]:
        loaded[entry["name"]] = tmf.load(os.path.join(directory, entry["file"]))
    stats = {}
    for name, arr in loaded.items():
        if name.startswith("input."):
            _, key, kind = name.split(".")
            stats.setdefault(key, {})[kind] = arr
            continue
        if name not in expected or expected[name].shape != arr.shape:
            raise CheckpointIncompatible(f"checkpoint-incompatible: unexpected array {name} {arr.shape}")
        expected[name][...] = arr
    if set(expected) - set(loaded) - {k for k in expected if k.startswith("input.")}:
        missing = sorted(set(expected) - set(loaded))[0]
        raise CheckpointIncompatible(f"checkpoint-incompatible: missing array {missing}")
    model.input_stats = {k: (v["mean"], v["std"]) for k, v in stats.items()}
    for k, n in manifest.get("batches_tracked", {}).items():
        model.bn[k].batches_tracked = n
    return model
