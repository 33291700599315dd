"""Differentiable layer primitives.

All ops take and return :class:`~trimodal.diffcore.autograd.Node` objects
(plain arrays are wrapped as constants).  Batched layouts are channel-first:
``[N, C, T]`` for sequences and ``[N, C, H, W]`` for images.  Convolutions are
cross-correlations.  Storage dtype follows the inputs; reductions accumulate in
float64.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidArgument
from .autograd import Node, as_node, make, note_kink, recording_kinks


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise / structural -------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    out = a.value + b.value
    return make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return make(av * bv, (a, b),
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                "mul")


def scale(a, c):
    a = as_node(a)
    c = float(c)
    return make(a.value * a.value.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return make(av @ bv, (a, b), backward, "matmul")


def transpose(a, axes):
    a = as_node(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make(np.transpose(a.value, axes), (a,),
                lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape):
    a = as_node(a)
    original = a.shape
    return make(a.value.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def concat(nodes, axis):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes),
                lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def mean(a, axis):
    a = as_node(a)
    axis = tuple(np.atleast_1d(axis)) if axis is not None else tuple(range(a.value.ndim))
    axis = tuple(ax % a.value.ndim for ax in axis)
    count = int(np.prod([a.shape[ax] for ax in axis]))
    out = a.value.mean(axis=axis, dtype=np.float64).astype(a.dtype)

    def backward(g):
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return make(out, (a,), backward, "mean")


def relu(x):
    x = as_node(x)
    xv = x.value
    mask = xv > 0
    if xv.size and recording_kinks():
        note_kink(np.min(np.abs(xv)), np.packbits(mask))
    return make(np.where(mask, xv, 0).astype(xv.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    x = as_node(x)
    xv = x.value
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ez = np.exp(xv[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softmax(x, axis=-1):
    x = as_node(x)
    xv = x.value
    if not -xv.ndim <= axis < xv.ndim:
        raise InvalidArgument(f"softmax axis {axis} out of range for {xv.ndim}-d input")
    z = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(xv.dtype)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(xv.dtype)
        return (out * (g - dot),)

    return make(out, (x,), backward, "softmax")


def dropout(x, p, rng=None, train=True):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    x = as_node(x)
    if not 0 <= p < 1:
        raise InvalidArgument(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    if rng is None:
        raise InvalidArgument("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return make(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


def channel_shuffle(x, groups):
    """Reshape channels to ``(groups, C/groups)``, transpose, flatten."""
    x = as_node(x)
    xv = x.value
    if xv.ndim < 2:
        raise InvalidArgument("channel_shuffle expects [N, C, ...]")
    n, c = xv.shape[:2]
    if groups < 1 or c % groups:
        raise InvalidArgument(f"{c} channels not divisible into {groups} groups")
    rest = xv.shape[2:]

    def shuffle(v, g):
        return v.reshape(n, g, c // g, *rest).swapaxes(1, 2).reshape(v.shape)

    return make(shuffle(xv, groups), (x,), lambda g: (shuffle(g, c // groups),),
                "channel_shuffle")


# -- dense / pooling ------------------------------------------------------------

def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` shaped ``[in, out]``."""
    x, w = as_node(x), as_node(w)
    if x.shape[-1] != w.shape[0]:
        raise InvalidArgument(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = matmul(x, w)
    if b is not None:
        b = as_node(b)
        if b.shape != (w.shape[1],):
            raise InvalidArgument("linear: bias shape mismatch")
        out = add(out, b)
    return out


def global_avg_pool(x):
    """Mean over every axis after the channel axis: ``[N, C, ...] -> [N, C]``."""
    x = as_node(x)
    if x.value.ndim < 3:
        raise InvalidArgument("global_avg_pool expects [N, C, ...]")
    return mean(x, tuple(range(2, x.value.ndim)))


def maxpool1d(x, k):
    """Non-overlapping max pooling with window and stride ``k`` (floor mode)."""
    x = as_node(x)
    xv = x.value
    if xv.ndim != 3:
        raise InvalidArgument("maxpool1d expects [N, C, T]")
    n, c, t = xv.shape
    if k < 1 or t < k:
        raise InvalidArgument(f"maxpool1d: window {k} larger than sequence length {t}")
    tp = t // k
    win = xv[:, :, :tp * k].reshape(n, c, tp, k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if k > 1 and recording_kinks():
        top2 = np.sort(win, axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
        # all-zero windows (dead ReLUs upstream) have zero gradient whichever index wins
        live = top2[..., 1] != 0
        note_kink(np.min(gap[live]) if live.any() else np.inf, idx)

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(xv)
        gx[:, :, :tp * k] = gw.reshape(n, c, tp * k)
        return (gx,)

    return make(out, (x,), backward, "maxpool1d")


# -- convolutions ---------------------------------------------------------------

def conv1d(x, w, b=None, stride=1, padding=0):
    """1-D cross-correlation.  ``x``: ``[N, C_in, T]`` or ``[C_in, T]``."""
    x, w = as_node(x), as_node(w)
    unbatched = x.value.ndim == 2
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 3:
        raise InvalidArgument("conv1d expects x [N, C, T] and w [C_out, C_in, k]")
    n, c, t = xv.shape
    o, ci, k = wv.shape
    if ci != c:
        raise InvalidArgument(f"conv1d: input has {c} channels, kernel expects {ci}")
    if stride < 1 or padding < 0:
        raise InvalidArgument("conv1d: stride must be >= 1 and padding >= 0")
    if k > t + 2 * padding:
        raise InvalidArgument(f"conv1d: kernel {k} longer than padded input {t + 2 * padding}")
    tp = (t + 2 * padding - k) // stride + 1
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding))) if padding else xv
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]          # [N, C, T', k]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(n * tp, c * k)
    wmat = wv.reshape(o, c * k)
    out = (cols @ wmat.T).reshape(n, tp, o).transpose(0, 2, 1)
    parents = [x, w]
    if b is not None:
        b = as_node(b)
        if b.shape != (o,):
            raise InvalidArgument("conv1d: bias shape mismatch")
        out = out + b.value[None, :, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(n * tp, o)
        gw = (g2.T @ cols).reshape(o, c, k)
        dcols = (g2 @ wmat).reshape(n, tp, c, k)
        gxp = np.zeros_like(xp)
        span = stride * (tp - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding:padding + t] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype))
        return tuple(grads)

    result = make(out, tuple(parents), backward, "conv1d")
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Grouped 2-D cross-correlation.

    ``x``: ``[N, C_in, H, W]`` (or unbatched ``[C_in, H, W]``); ``w``:
    ``[C_out, C_in/groups, kh, kw]``.  ``groups == C_in`` with one kernel per
    channel is a depthwise convolution.
    """
    x, w = as_node(x), as_node(w)
    unbatched = x.value.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise InvalidArgument("conv2d expects x [N, C, H, W] and w [C_out, C_in/g, kh, kw]")
    n, c, h, wd = xv.shape
    o, cg, kh, kw = wv.shape
    if groups < 1 or c % groups or o % groups:
        raise InvalidArgument(f"conv2d: channels {c}->{o} not divisible by groups={groups}")
    if cg != c // groups:
        raise InvalidArgument(f"conv2d: kernel expects {cg} channels per group, got {c // groups}")
    if stride < 1 or padding < 0:
        raise InvalidArgument("conv2d: stride must be >= 1 and padding >= 0")
    hp = (h + 2 * padding - kh) // stride + 1
    wp = (wd + 2 * padding - kw) // stride + 1
    if hp < 1 or wp < 1:
        raise InvalidArgument("conv2d: kernel larger than padded input")
    og = o // groups
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    hs, ws = stride * (hp - 1) + 1, stride * (wp - 1) + 1

    def window(arr, i, j):
        return arr[:, :, i:i + hs:stride, j:j + ws:stride]

    if cg == 1 and og == 1:
        # depthwise: one shifted multiply-accumulate per kernel tap
        out = np.zeros((n, o, hp, wp), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                out += window(xp, i, j) * wv[:, 0, i, j][None, :, None, None]
    else:
        # im2col: [G, Cg*kh*kw, N*H'*W'] columns, one matmul per group
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = (win.reshape(n, groups, cg, hp, wp, kh, kw)
                .transpose(1, 2, 5, 6, 0, 3, 4)
                .reshape(groups, cg * kh * kw, n * hp * wp))
        wmat = wv.reshape(groups, og, cg * kh * kw)
        out = (wmat @ cols).reshape(groups, og, n, hp, wp).transpose(2, 0, 1, 3, 4)
        out = np.ascontiguousarray(out.reshape(n, o, hp, wp))
    parents = [x, w]
    if b is not None:
        b = as_node(b)
        if b.shape != (o,):
            raise InvalidArgument("conv2d: bias shape mismatch")
        out += b.value[None, :, None, None]
        parents.append(b)

    def backward(g):
        gxp = np.zeros_like(xp)
        if cg == 1 and og == 1:
            gw = np.zeros_like(wv)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * window(xp, i, j)).sum(axis=(0, 2, 3), dtype=np.float64)
                    window(gxp, i, j)[...] += g * wv[:, 0, i, j][None, :, None, None]
        else:
            gmat = g.reshape(n, groups, og, hp * wp).transpose(1, 2, 0, 3).reshape(
                groups, og, n * hp * wp)
            gw = (gmat @ cols.swapaxes(1, 2)).reshape(o, cg, kh, kw)
            dcols = (wmat.swapaxes(1, 2) @ gmat).reshape(groups, cg, kh, kw, n, hp, wp)
            dcols = dcols.transpose(4, 0, 1, 2, 3, 5, 6).reshape(n, c, kh, kw, hp, wp)
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += dcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype))
        return tuple(grads)

    result = make(out, tuple(parents), backward, "conv2d")
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


# -- normalization ------------------------------------------------------------------

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    batches_tracked: int = 0

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def astype(self, dtype):
        return BatchNormState(self.running_mean.astype(dtype),
                              self.running_var.astype(dtype), self.batches_tracked)


def batchnorm(x, gamma, beta, state, train=True, eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over every axis except axis 1.

    Train mode normalizes by batch statistics and updates ``state`` in place
    (biased variance for normalization, unbiased for the running estimate);
    eval mode normalizes by the running statistics.
    """
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    xv = x.value
    if xv.ndim < 2:
        raise InvalidArgument("batchnorm expects [N, C, ...]")
    if eps <= 0:
        raise InvalidArgument("batchnorm eps must be positive")
    c = xv.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidArgument("batchnorm: gamma/beta must have one entry per channel")
    axes = (0,) + tuple(range(2, xv.ndim))
    bshape = (1, c) + (1,) * (xv.ndim - 2)
    m = xv.size // c
    gv = gamma.value.reshape(bshape)
    bv = beta.value.reshape(bshape)

    if train:
        if m < 2:
            raise InvalidArgument("batchnorm in train mode needs at least 2 values per channel")
        mu = xv.mean(axis=axes, dtype=np.float64)
        centered = xv - mu.astype(xv.dtype).reshape(bshape)
        var = np.mean(np.square(centered), axis=axes, dtype=np.float64)
        inv_std = 1.0 / np.sqrt(var + eps)
        inv = inv_std.astype(xv.dtype).reshape(bshape)
        xhat = centered * inv
        if state is not None:
            state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu
            state.running_var[...] = ((1 - momentum) * state.running_var
                                      + momentum * var * m / (m - 1))
            state.batches_tracked += 1
        out = gv * xhat + bv

        def backward(g):
            dgamma = np.sum(g * xhat, axis=axes, dtype=np.float64)
            dbeta = np.sum(g, axis=axes, dtype=np.float64)
            # d/dx of gamma * xhat, folded through the batch statistics
            ga = gamma.value.astype(np.float64) * inv_std
            c1 = (ga * dbeta / m).astype(xv.dtype).reshape(bshape)
            c2 = (ga * dgamma / m).astype(xv.dtype).reshape(bshape)
            dx = g * (gv * inv) - c1 - xhat * c2
            return dx, dgamma.astype(xv.dtype), dbeta.astype(xv.dtype)
    else:
        if state is None:
            raise InvalidArgument("batchnorm in eval mode needs running statistics")
        inv_std = (1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)).astype(xv.dtype)
        xhat = (xv - state.running_mean.reshape(bshape).astype(xv.dtype)) * inv_std.reshape(bshape)
        out = gv * xhat + bv

        def backward(g):
            return (g * gv * inv_std.reshape(bshape),
                    (g * xhat).sum(axis=axes, dtype=np.float64).astype(xv.dtype),
                    g.sum(axis=axes, dtype=np.float64).astype(xv.dtype))

    return make(out.astype(xv.dtype), (x, gamma, beta), backward, "batchnorm")


# -- loss ------------------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_node(logits)
    lv = logits.value
    if lv.ndim != 2:
        raise InvalidArgument("cross_entropy expects logits [N, K]")
    labels = np.asarray(labels)
    n, k = lv.shape
    if labels.shape != (n,):
        raise InvalidArgument(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.dtype.kind not in "iu":
        if not np.all(labels == np.round(labels)):
            raise InvalidArgument("cross_entropy labels must be integer class ids")
        labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidArgument(f"cross_entropy label outside [0, {k})")
    l64 = lv.astype(np.float64)
    shift = l64.max(axis=1, keepdims=True)
    lse = np.log(np.exp(l64 - shift).sum(axis=1)) + shift[:, 0]
    picked = l64[np.arange(n), labels]
    loss = np.asarray((lse - picked).mean(), dtype=lv.dtype)

    def backward(g):
        probs = np.exp(l64 - lse[:, None])
        probs[np.arange(n), labels] -= 1.0
        return ((probs * (float(g) / n)).astype(lv.dtype),)

    return make(loss, (logits,), backward, "cross_entropy")


__all__ = [
    "Node", "BatchNormState", "add", "mul", "scale", "matmul", "transpose", "reshape",
    "concat", "mean", "relu", "sigmoid", "softmax", "dropout", "channel_shuffle",
    "linear", "global_avg_pool", "maxpool1d", "conv1d", "conv2d", "batchnorm",
    "cross_entropy",
]
