"""Frame selection, region cropping and bilinear resizing for frame stacks."""
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import InvalidArgument


@dataclass
class FrameStack:
    frames: np.ndarray          # [N, C, H, W], values in [0, 1]
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise InvalidArgument(f"frame stack must be [N, C, H, W], got shape {self.frames.shape}")
        n, c, h, w = self.frames.shape
        if n < 1:
            raise InvalidArgument("frame stack is empty")
        if c not in (1, 3):
            raise InvalidArgument(f"frames need 1 or 3 channels, got {c}")
        if h < 8 or w < 8:
            raise InvalidArgument(f"frames must be at least 8x8, got {h}x{w}")

    def __len__(self):
        return self.frames.shape[0]


def center_square(frame):
    """Default region: the centered square of side ``min(H, W)``."""
    h, w = frame.shape[-2:]
    side = min(h, w)
    return ((w - side) // 2, (h - side) // 2, side, side)


def full_frame(frame):
    h, w = frame.shape[-2:]
    return (0, 0, w, h)


@dataclass
class RegionProvider:
    """Named ``frame -> (x, y, w, h)`` callable.

    Wrap a face detector here; any exception or an invalid box triggers the
    center-square fallback in :func:`preprocess_video`.
    """
    name: str
    locate: callable = field(default=center_square)

    def __call__(self, frame):
        return self.locate(frame)


CENTER = RegionProvider("center-square", center_square)
FULL_FRAME = RegionProvider("full-frame", full_frame)


def validate_box(box, frame):
    h, w = frame.shape[-2:]
    try:
        x0, y0, bw, bh = (int(v) for v in box)
    except (TypeError, ValueError):
        raise InvalidArgument(f"region must be four integers, got {box!r}") from None
    if bw <= 0 or bh <= 0:
        raise InvalidArgument(f"degenerate region {box!r}")
    if x0 < 0 or y0 < 0 or x0 + bw > w or y0 + bh > h:
        raise InvalidArgument(f"region {box!r} leaves the {h}x{w} frame")
    return x0, y0, bw, bh


def frame_indices(n, count=15):
    if n < 1:
        raise InvalidArgument("cannot sample frames from an empty stack")
    if count < 1:
        raise InvalidArgument("frame count must be positive")
    return (np.arange(count) * n) // count


def sample_frames(v, count=15):
    """Evenly spread selection ``floor(i * N / count)``; repeats frames when ``N < count``."""
    idx = frame_indices(len(v), count)
    return FrameStack(v.frames[idx], v.source_id)


def _axis_coords(n_in, n_out):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def crop_and_resize(frame, box, out_h, out_w):
    """Crop ``frame`` ([C, H, W] or [H, W]) to ``box`` and resample bilinearly.

    Sampling is corner-aligned: output corners coincide with crop corners.
    """
    frame = np.asarray(frame)
    x0, y0, bw, bh = validate_box(box, frame)
    if out_h < 1 or out_w < 1:
        raise InvalidArgument("output size must be positive")
    crop = frame[..., y0:y0 + bh, x0:x0 + bw].astype(np.float64)
    r0, r1, fy = _axis_coords(bh, out_h)
    c0, c1, fx = _axis_coords(bw, out_w)
    top = crop[..., r0, :] * (1 - fy)[:, None] + crop[..., r1, :] * fy[:, None]
    out = top[..., c0] * (1 - fx) + top[..., c1] * fx
    return out.astype(frame.dtype if frame.dtype.kind == "f" else np.float32)


def preprocess_video(v, provider=CENTER, count=15, out_h=224, out_w=224, log=None):
    """Sample, crop and resize a stack to ``[count, C, out_h, out_w]``.

    Frames where ``provider`` fails fall back to the center square; each such
    video gets a ``fallback`` line in ``log`` (a list of tab-separated
    ``status, source_id, detail`` strings), otherwise an ``ok`` line.
    """
    picked = sample_frames(v, count)
    out = np.empty((count, picked.frames.shape[1], out_h, out_w), dtype=np.float32)
    failures = []
    for i, frame in enumerate(picked.frames):
        try:
            box = validate_box(provider(frame), frame)
        except Exception as exc:  # provider is user code
            failures.append(f"frame {i}: {exc}")
            box = center_square(frame)
        out[i] = crop_and_resize(frame, box, out_h, out_w)
    if log is not None:
        if failures:
            log.append(f"fallback\t{v.source_id}\t{provider.name} failed on "
                       f"{len(failures)}/{count} frames; first: {failures[0]}")
        else:
            log.append(f"ok\t{v.source_id}\t{provider.name}")
    return FrameStack(out, v.source_id)


class FramePreprocessor(TransformerMixin, BaseEstimator):
    """sklearn wrapper around :func:`preprocess_video` for a batch of stacks."""

    def __init__(self, count=15, out_h=224, out_w=224, provider=None):
        self.count = count
        self.out_h = out_h
        self.out_w = out_w
        self.provider = provider

    def fit(self, X, y=None):
        self.log_ = []
        return self

    def transform(self, X):
        if not hasattr(self, "log_"):
            self.log_ = []
        provider = self.provider if self.provider is not None else CENTER
        stacks = []
        for i, item in enumerate(X):
            stack = item if isinstance(item, FrameStack) else FrameStack(item, str(i))
            stacks.append(preprocess_video(stack, provider, self.count, self.out_h, self.out_w,
                                           log=self.log_).frames)
        return np.stack(stacks)
