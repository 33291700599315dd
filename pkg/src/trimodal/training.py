"""Optimization loop, evaluation and the modality ablation harness."""
import csv
import io
import logging
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .augment import AugmentConfig, compose_batch, take
from .diffcore import cross_entropy
from .diffcore.rng import RngStream
from .errors import CheckpointIncompatible, InvalidArgument, NumericalError
from .model import (ABLATION_MASKS, INPUT_KEYS, ModelConfig, TriModalNet, mask_name, parse_mask,
                    save_checkpoint)

log = logging.getLogger(__name__)

METRICS_HEADER = ("config", "seed", "epoch", "split", "loss", "accuracy")


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-5
    epochs: int = 8
    batch_size: int = 16
    seed: int = 0
    mask: str = "A-V-R"
    augment: bool = True
    val_fraction: float = 0.25
    split_seed: int = 0
    ablation_seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidArgument("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if self.plateau_patience < 1:
            raise InvalidArgument("plateau_patience must be at least 1")
        if not 0 < self.plateau_factor < 1:
            raise InvalidArgument("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be positive")
        if self.epochs < 1:
            raise InvalidArgument("epochs must be positive")
        self.mask = mask_name(self.mask)
        self.ablation_seeds = tuple(int(s) for s in self.ablation_seeds)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown train config key {sorted(unknown)[0]!r}")
        return cls(**d)


# -- optimizer -------------------------------------------------------------------------

def sgd_step(params, velocity, lr, momentum):
    """Heavy-ball update ``v <- momentum * v + g; p <- p - lr * v`` in place.

    ``velocity`` maps parameter names to buffers and is filled lazily (zero
    initial velocity).
    """
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {p.name}")
        v = velocity.get(p.name)
        if v is None:
            v = velocity[p.name] = np.zeros_like(p.value)
        v *= momentum
        v += g
        p.value -= p.value.dtype.type(lr) * v


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a
    validation-loss improvement of at least ``threshold``; never below ``min_lr``."""

    def __init__(self, lr, factor=0.5, patience=5, threshold=1e-4, min_lr=1e-5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss):
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def lr_schedule(history, lr, factor=0.5, patience=5, threshold=1e-4, min_lr=1e-5):
    """Learning rate after replaying a validation-loss ``history``."""
    if len(history) == 0:
        raise InvalidArgument("lr_schedule needs at least one validation loss")
    sched = PlateauSchedule(lr, factor, patience, threshold, min_lr)
    for v in history:
        sched.step(v)
    return sched.lr


# -- evaluation --------------------------------------------------------------------------

@dataclass
class MetricsRow:
    config: str
    seed: int
    epoch: int
    split: str
    loss: float
    accuracy: float

    def as_csv(self):
        return [self.config, str(self.seed), str(self.epoch), self.split,
                repr(float(self.loss)), repr(float(self.accuracy))]


def _model_inputs(model, data, index=None):
    batch = data if index is None else take(data, index)
    return {INPUT_KEYS[m]: batch[INPUT_KEYS[m]] for m in model.mask}


def predict_logits(model, data, batch_size=64):
    n = len(data["label"]) if "label" in data else len(data[INPUT_KEYS[model.mask[0]]])
    out = []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        out.append(model.forward(_model_inputs(model, data, idx), train=False).value)
    return np.concatenate(out).astype(np.float64)


def evaluate(model, data, mask=None, batch_size=64):
    """Eval-mode ``(loss, accuracy)`` on standardized ``data``."""
    if mask is not None and parse_mask(mask) != model.mask:
        raise CheckpointIncompatible(
            f"checkpoint-incompatible: model built for {mask_name(model.mask)}, asked for {mask_name(mask)}")
    labels = np.asarray(data["label"])
    if len(labels) == 0:
        raise InvalidArgument("cannot evaluate on an empty record list")
    missing = [INPUT_KEYS[m] for m in model.mask if data.get(INPUT_KEYS[m]) is None]
    if missing:
        raise InvalidArgument(f"data lacks {missing[0]!r} required by mask {mask_name(model.mask)}")
    logits = predict_logits(model, data, batch_size)
    loss = float(cross_entropy(logits, labels).value)
    accuracy = float(np.mean(logits.argmax(axis=1) == labels))
    return loss, accuracy


def zero_modality(data, key):
    out = dict(data)
    out[key] = np.zeros_like(data[key])
    return out


def robustness_drop(model, data):
    """Mean accuracy lost when each active modality in turn is replaced by zeros."""
    _, clean = evaluate(model, data)
    drops = [clean - evaluate(model, zero_modality(data, INPUT_KEYS[m]))[1] for m in model.mask]
    return float(np.mean(drops)), clean


# -- training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: TriModalNet            # best-validation-loss snapshot
    last: TriModalNet
    history: list = field(default_factory=list)
    best_epoch: int = 0
    lr_trace: list = field(default_factory=list)

    def metrics_csv(self):
        return metrics_to_csv(self.history)


def metrics_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue()


def train(train_set, val_set, model_cfg, train_cfg, augment_cfg=None, out_dir=None,
          config_id=None, model=None, aug_log=None):
    """Fit a :class:`TriModalNet` with momentum SGD and a plateau schedule.

    ``train_set``/``val_set`` are raw (unstandardized) batches; input
    statistics come from ``train_set``.  Deterministic given ``train_cfg.seed``.
    The returned model is the epoch with the lowest validation loss.
    Augmentation draws go to ``aug_log`` (a list) when given, prefixed with
    ``epoch:batch``.
    """
    if len(train_set["label"]) == 0 or len(val_set["label"]) == 0:
        raise InvalidArgument("training needs non-empty train and validation splits")
    stream = RngStream(train_cfg.seed, 0)
    config_id = config_id or train_cfg.mask
    if model is None:
        model = TriModalNet(model_cfg, train_cfg.mask, stream.child(1).generator())
        model.fit_input_stats(train_set)
    elif model.mask != parse_mask(train_cfg.mask):
        raise CheckpointIncompatible("checkpoint-incompatible: initial model has a different mask")
    train_std = model.standardize(train_set)
    val_std = model.standardize(val_set)
    keys = [INPUT_KEYS[m] for m in model.mask] + ["label"]
    train_std = {k: train_std[k] for k in keys}
    val_std = {k: val_std[k] for k in keys}
    augment_cfg = augment_cfg or AugmentConfig()

    shuffle_rng = stream.child(2).generator()
    aug_rng = stream.child(3).generator()
    drop_rng = stream.child(4).generator()
    sched = PlateauSchedule(train_cfg.lr, train_cfg.plateau_factor, train_cfg.plateau_patience,
                            train_cfg.plateau_threshold, train_cfg.min_lr)
    velocity = {}
    params = model.parameters()
    result = TrainResult(model=model.copy(), last=model)
    best_loss = np.inf
    n = len(train_std["label"])

    for epoch in range(1, train_cfg.epochs + 1):
        lr = sched.lr
        order = shuffle_rng.permutation(n)
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            batch = take(train_std, idx)
            if train_cfg.augment:
                draws = [] if aug_log is not None else None
                batch = compose_batch(batch, aug_rng, augment_cfg, draws)
                if draws:
                    aug_log.extend(f"{epoch}:{b}\t{line}" for line in draws)
            model.zero_grad()
            try:
                logits = model.forward(_model_inputs(model, batch), train=True, rng=drop_rng)
                loss = cross_entropy(logits, batch["label"])
                loss.backward()
                sgd_step(params, velocity, lr, train_cfg.momentum)
            except NumericalError as exc:
                raise NumericalError(f"training diverged in epoch {epoch}: {exc}",
                                     checkpoint=result.model) from exc
        rows = []
        for split_name, data in (("train", train_std), ("val", val_std)):
            loss, acc = evaluate(model, data)
            rows.append(MetricsRow(config_id, train_cfg.seed, epoch, split_name, loss, acc))
        result.history.extend(rows)
        val_loss = rows[1].loss
        if not np.isfinite(val_loss):
            raise NumericalError(f"validation loss is {val_loss} in epoch {epoch}",
                                 checkpoint=result.model)
        result.lr_trace.append(lr)
        if val_loss < best_loss:
            best_loss = val_loss
            result.model = model.copy()
            result.best_epoch = epoch
        sched.step(val_loss)
        log.debug("%s seed=%d epoch=%d lr=%.4g train=%.4f/%.3f val=%.4f/%.3f", config_id,
                  train_cfg.seed, epoch, lr, rows[0].loss, rows[0].accuracy, rows[1].loss,
                  rows[1].accuracy)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(result.model, os.path.join(out_dir, "checkpoint"), step=result.best_epoch)
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            fh.write(result.metrics_csv())
    return result


# -- ablation ---------------------------------------------------------------------------------

@dataclass
class AblationResult:
    masks: tuple
    seeds: tuple
    # (seed, mask) -> (loss, accuracy); NaN for failed configs
    cells: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    histories: list = field(default_factory=list)

    def accuracy(self, mask, seed=None):
        if seed is not None:
            return self.cells[(seed, mask)][1]
        return float(np.mean([self.cells[(s, mask)][1] for s in self.seeds]))

    def loss(self, mask, seed=None):
        if seed is not None:
            return self.cells[(seed, mask)][0]
        return float(np.mean([self.cells[(s, mask)][0] for s in self.seeds]))

    def table(self):
        """Rows ``(seed, metric, *values)`` in mask order, then the seed means."""
        rows = []
        for seed in list(self.seeds) + ["mean"]:
            for metric, getter in (("accuracy", self.accuracy), ("loss", self.loss)):
                s = None if seed == "mean" else seed
                rows.append((str(seed), metric, *[getter(m, s) for m in self.masks]))
        return rows

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("seed", "metric") + tuple(self.masks))
        for row in self.table():
            w.writerow(row[:2] + tuple(repr(float(v)) for v in row[2:]))
        return buf.getvalue()


def ablate(train_set, val_set, model_cfg, train_cfg, augment_cfg=None, seeds=None,
           masks=ABLATION_MASKS, out_dir=None):
    """Train and score every modality subset under identical settings.

    A configuration that raises is recorded (NaN cells, message in
    ``errors``) and the remaining ones still run.
    """
    seeds = tuple(train_cfg.ablation_seeds if seeds is None else seeds)
    masks = tuple(mask_name(m) for m in masks)
    result = AblationResult(masks=masks, seeds=seeds)
    for seed in seeds:
        for mask in masks:
            cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed, "mask": mask})
            sub = os.path.join(out_dir, f"{mask}_seed{seed}") if out_dir else None
            try:
                res = train(train_set, val_set, model_cfg, cfg, augment_cfg, out_dir=sub,
                            config_id=mask)
                loss, acc = evaluate(res.model, res.model.standardize(val_set))
                result.cells[(seed, mask)] = (loss, acc)
                result.histories.extend(res.history)
            except Exception as exc:  # keep going; the table marks the hole
                log.warning("ablation config %s seed %d failed: %s", mask, seed, exc)
                result.cells[(seed, mask)] = (float("nan"), float("nan"))
                result.errors[(seed, mask)] = f"{type(exc).__name__}: {exc}"
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            fh.write(result.to_csv())
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
            fh.write(metrics_to_csv(result.histories))
    return result


def split_data(records, arrays, val_fraction=0.25, seed=0):
    """Stratified split of preprocessed ``arrays`` (aligned with ``records``)."""
    from .dataset import split
    train_recs, val_recs = split(records, val_fraction, seed)
    pos = {r.key: i for i, r in enumerate(records)}
    tr = np.array([pos[r.key] for r in train_recs], dtype=np.int64)
    va = np.array([pos[r.key] for r in val_recs], dtype=np.int64)
    return take(arrays, tr), take(arrays, va)
