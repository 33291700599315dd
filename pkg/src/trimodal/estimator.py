"""scikit-learn style wrapper around the training loop."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentConfig
from .errors import InvalidArgument
from .model import INPUT_KEYS, ModelConfig, parse_mask
from .training import TrainConfig, evaluate, predict_logits, train


def check_inputs(X, mask, y=None):
    """Validate a dict of modality arrays against ``mask``; returns ``(X, y)``.

    Arrays are converted to float32, all must share the leading length, and
    ``y`` (when given) must be integer class ids in ``{0, 1}``.
    """
    if not isinstance(X, dict):
        raise InvalidArgument("X must be a dict with 'audio', 'face' and/or 'road' arrays")
    out, n = {}, None
    for m in parse_mask(mask):
        key = INPUT_KEYS[m]
        if X.get(key) is None:
            raise InvalidArgument(f"X lacks {key!r}, required by mask {mask}")
        arr = np.asarray(X[key], dtype=np.float32)
        want = 3 if key == "audio" else 5
        if arr.ndim != want:
            raise InvalidArgument(f"X[{key!r}] must be {want}-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgument(f"X[{key!r}] contains NaN or Inf")
        if n is not None and len(arr) != n:
            raise InvalidArgument("all modality arrays need the same number of samples")
        n = len(arr)
        out[key] = arr
    if n == 0:
        raise InvalidArgument("X holds no samples")
    if y is not None:
        y = np.asarray(y)
        if y.shape != (n,):
            raise InvalidArgument(f"y must have shape ({n},), got {y.shape}")
        if not np.issubdtype(y.dtype, np.integer) or np.any((y < 0) | (y > 1)):
            raise InvalidArgument("y must hold integer labels 0 (safe) or 1 (dangerous)")
        y = y.astype(np.int64)
    return out, y


class TriModalHazardClassifier(ClassifierMixin, BaseEstimator):
    """Binary safe/dangerous classifier over audio MFCCs and two frame stacks.

    ``X`` is a dict: ``audio`` ``[N, n_mfcc, T]``, ``face`` and ``road``
    ``[N, F, C, H, W]``; only the keys named by ``mask`` are needed.
    """

    def __init__(self, mask="A-V-R", model_config=None, epochs=20, lr=0.05, momentum=0.9,
                 batch_size=16, augment=True, augment_config=None, seed=0):
        self.mask = mask
        self.model_config = model_config
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.augment = augment
        self.augment_config = augment_config
        self.seed = seed

    def _model_config(self):
        cfg = self.model_config
        if cfg is None:
            return ModelConfig()
        return cfg if isinstance(cfg, ModelConfig) else ModelConfig.from_dict(dict(cfg))

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_inputs(X, self.mask, y)
        train_set = {**X, "label": y}
        if X_val is None:
            val_set = train_set
        else:
            Xv, yv = check_inputs(X_val, self.mask, y_val)
            val_set = {**Xv, "label": yv}
        aug = self.augment_config
        if aug is not None and not isinstance(aug, AugmentConfig):
            aug = AugmentConfig.from_dict(dict(aug))
        tcfg = TrainConfig(lr=self.lr, momentum=self.momentum, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed, mask=self.mask,
                           augment=self.augment)
        result = train(train_set, val_set, self._model_config(), tcfg, aug)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        return self

    def decision_logits(self, X):
        check_is_fitted(self, "model_")
        X, _ = check_inputs(X, self.mask)
        return predict_logits(self.model_, self.model_.standardize(X))

    def predict_proba(self, X):
        z = self.decision_logits(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.decision_logits(X).argmax(axis=1)

    def evaluate(self, X, y):
        """``(mean cross-entropy, accuracy)`` in eval mode."""
        check_is_fitted(self, "model_")
        X, y = check_inputs(X, self.mask, y)
        return evaluate(self.model_, {**self.model_.standardize(X), "label": y})
