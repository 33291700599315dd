"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Node` wraps an array and, when any input requires a gradient, a
closure mapping the upstream gradient to one gradient per parent.  Graphs that
involve no trainable input are never recorded, so inference pays nothing for
the tape.
"""
from contextlib import contextmanager

import numpy as np

from ..errors import InvalidArgument, NumericalError


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="const",
                 requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable :class:`Param`."""
        if grad is None:
            if self.value.size != 1:
                raise InvalidArgument("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        if not self.requires_grad:
            return
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.value)
                node.grad += g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericalError(f"non-finite gradient flowing out of {node.op}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Param(Node):
    """Named trainable leaf.  ``grad`` always has the value's shape."""

    __slots__ = ("name",)

    def __init__(self, name, value):
        value = np.asarray(value)
        super().__init__(value, op="param", requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_node(x, dtype=None):
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return Node(arr)


def make(value, parents, backward_fn, op):
    """Wrap an op result, recording the tape only if a parent needs it."""
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, op=op)
    return Node(value, parents, backward_fn, op, requires_grad=True)


# Distance of the current forward pass to non-differentiable points (ReLU at
# zero, ties inside a max-pool window) and the activation pattern on either side
# of them.  Only gradient checking reads these.
class KinkLog:
    def __init__(self):
        self.margins = []
        self.patterns = []

    def __iter__(self):
        return iter(self.margins)

    def __len__(self):
        return len(self.margins)

    def signature(self):
        return hash(tuple(self.patterns))


_kinks = None


@contextmanager
def record_kinks():
    global _kinks
    previous = _kinks
    log = KinkLog()
    _kinks = log
    try:
        yield log
    finally:
        _kinks = previous


def recording_kinks():
    return _kinks is not None


def note_kink(margin, pattern=None):
    if _kinks is not None:
        _kinks.margins.append(float(margin))
        if pattern is not None:
            _kinks.patterns.append(np.asarray(pattern).tobytes())
