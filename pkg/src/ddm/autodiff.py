"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op records its inputs and a closure mapping the output gradient to
input gradients. :func:`backward` walks the graph in reverse topological
order and accumulates ``.grad`` on every node that requires it.
"""

from __future__ import annotations

import numpy as np

from ddm.exceptions import ShapeError, UsageError
from ddm.tensor import conv3x3_taps, pad1, shift_spread, shift_sum, tap_matrix


class Var:
    """Array-valued graph node."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _lift(x, like=None) -> Var:
    if isinstance(x, Var):
        return x
    dtype = like.data.dtype if like is not None else None
    return Var(np.asarray(x, dtype=dtype))


def _node(data, parents, backward) -> Var:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Var(data)
    return Var(data, True, parents, backward)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Var:
    a = _lift(a, b if isinstance(b, Var) else None)
    b = _lift(b, a)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a = _lift(a, b if isinstance(b, Var) else None)
    b = _lift(b, a)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a = _lift(a, b if isinstance(b, Var) else None)
    b = _lift(b, a)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Var, b: Var) -> Var:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Var, w: Var, b: Var) -> Var:
    """3x3 same-padded cross-correlation on channels-last ``(B, H, W, C)``."""
    Cout, Cin = w.shape[:2]
    if x.shape[3] != Cin:
        raise ShapeError(f"input has {x.shape[3]} channels, kernels expect {Cin}")
    xp = pad1(x.data)
    taps = tap_matrix(w.data)
    out = shift_sum(conv3x3_taps(xp, taps)) + b.data

    def back(g):
        gz = shift_spread(g).reshape(-1, 9 * Cout)
        gtaps = xp.reshape(-1, Cin).T @ gz
        gw = gtaps.reshape(Cin, 3, 3, Cout).transpose(3, 0, 1, 2)
        gb = g.reshape(-1, Cout).sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = (gz @ taps.T).reshape(xp.shape)[:, 1:-1, 1:-1]
        return gx, gw, gb

    return _node(out, (x, w, b), back)


def silu(x: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s
    return _node(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def relu(x: Var) -> Var:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Var) -> Var:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Var) -> Var:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Var) -> Var:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def absolute(x: Var) -> Var:
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Var, lo: float, hi: float) -> Var:
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def total(x: Var) -> Var:
    return _node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Var) -> Var:
    n = x.data.size
    return _node(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def reshape(x: Var, shape) -> Var:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs, axis=-1) -> Var:
    sizes = [v.shape[axis] for v in xs]
    bounds = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([v.data for v in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def avgpool2(x: Var) -> Var:
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"spatial dims {H}x{W} must be even to pool")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * g.dtype.type(0.25),)

    return _node(out, (x,), back)


def upsample2(x: Var) -> Var:
    """Nearest-neighbour upsampling by 2 in both spatial dims."""
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _node(out, (x,), lambda g: (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),))


def _topological(root: Var):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable leaf and node."""
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
