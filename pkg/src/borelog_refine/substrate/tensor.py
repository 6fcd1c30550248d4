"""Reverse-mode autodiff on dense float64 arrays.

Deliberately small: only the operator vocabulary the segmentation networks
need. Tensors record a tape of parent links and backward closures; calling
``backward`` on a scalar loss walks the tape in reverse topological order.
All computation is float64 and single-threaded apart from BLAS matmuls,
so results are bit-stable for a fixed seed.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class SubstrateError(RuntimeError):
    """Raised for shape mismatches and non-finite values in the compute layer."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(DTYPE, copy=False)
    return np.asarray(x, dtype=DTYPE)


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise SubstrateError(f"non-finite values produced in {where}")


class Tensor:
    """Dense float64 array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # own=True promises g is freshly allocated and unshared, so the first
    # store can take it without the defensive copy
    if t.grad is None:
        if g.shape != t.data.shape:
            raise SubstrateError(
                f"gradient shape mismatch: {g.shape} vs {t.data.shape}")
        if own and g.base is None and g.dtype == DTYPE:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=DTYPE)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every requires_grad node."""
    if loss.data.size != 1:
        raise SubstrateError("backward requires a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # intermediate grads are spent once propagated


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            da = _unbroadcast(g, a.data.shape)
            _accum(a, da, own=da is not g)
        if b.requires_grad:
            db = _unbroadcast(g, b.data.shape)
            _accum(b, db, own=db is not g)

    return _node(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _node(out_data, (a, b), bwd)


def square(a) -> Tensor:
    a = _lift(a)
    out_data = a.data * a.data

    def bwd(g):
        _accum(a, g * (2.0 * a.data), own=True)

    return _node(out_data, (a,), bwd)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data, own=True)

    return _node(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = _lift(a)
    out_data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data, own=True)

    return _node(out_data, (a,), bwd)


def relu(a) -> Tensor:
    a = _lift(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0), own=True)

    return _node(out_data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data), own=True)

    return _node(out_data, (a,), bwd)


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data), own=True)

    return _node(out_data, (a,), bwd)


def arctanh(a) -> Tensor:
    a = _lift(a)
    if np.any(np.abs(a.data) >= 1.0):
        raise SubstrateError("arctanh input must lie strictly inside (-1, 1)")
    out_data = np.arctanh(a.data)

    def bwd(g):
        _accum(a, g / (1.0 - a.data * a.data), own=True)

    return _node(out_data, (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy(), own=True)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy(), own=True)

    return _node(out_data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# shape / indexing ops


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out_data, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)), own=True)

    return _node(out_data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                _accum(t, piece)

    return _node(out_data, tuple(ts), bwd)


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along an axis; backward scatter-adds into the source."""
    a = _lift(a)
    idx = np.asarray(indices)
    out_data = np.take(a.data, idx, axis=axis)

    def bwd(g):
        da = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(da, idx, g)
        else:
            moved = np.moveaxis(da, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        _accum(a, da, own=True)

    return _node(out_data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise SubstrateError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}") from err

    def bwd(g):
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(da, a.data.shape), own=True)
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(db, b.data.shape), own=True)

    return _node(out_data, (a, b), bwd)


# ---------------------------------------------------------------------------
# softmax (optionally masked, used by windowed attention)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax; entries where mask is False get exactly zero weight."""
    a = _lift(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out_data = e / s
    check_finite(out_data, "softmax")

    def bwd(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner), own=True)

    return _node(out_data, (a,), bwd)
