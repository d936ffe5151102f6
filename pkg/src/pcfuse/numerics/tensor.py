"""Dense float64 tensors with reverse-mode differentiation.

Each op records its parents and a closure that pushes the output gradient
back to them. ``backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ---------------------------------------------------
    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior buffers are not needed after propagation
                node.grad = None

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else ())
    if req:
        out._backward = backward
    return out


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def bw(g):
        x._accum(g * mask)

    return _make(data, (x,), bw)


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def bw(g):
        x._accum(g * sign)

    return _make(np.abs(x.data), (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accum(2.0 * g * x.data)

    return _make(x.data * x.data, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def bw(g):
        x._accum(g * 0.5 / data)

    return _make(data, (x,), bw)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def bw(g):
        x._accum(g * data)

    return _make(data, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def bw(g):
        x._accum(g * (1.0 - data * data))

    return _make(data, (x,), bw)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), bw)


# -- reductions -------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(data, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def max_pool_set(x: Tensor, axis: int = -2, keepdims: bool = True) -> Tensor:
    """Max over the set axis (default: rows). Ties send gradient to the lowest index."""
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), gk, axis=axis)
        x._accum(full)

    return _make(data if keepdims else np.squeeze(data, axis), (x,), bw)


# -- shape ops --------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        x._accum(g.reshape(x.shape))

    return _make(data, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        x._accum(np.transpose(g, inv))

    return _make(data, (x,), bw)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    def bw(g):
        x._accum(np.swapaxes(g, a, b))

    return _make(np.swapaxes(x.data, a, b), (x,), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None

    def bw(g):
        x._accum(_unbroadcast(g, x.shape))

    return _make(np.array(data), (x,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _make(data, tuple(tensors), bw)


def index(x: Tensor, idx) -> Tensor:
    data = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return _make(data, (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of ``x`` (shape (..., N, D)) with integer array ``idx`` (shape (..., *K)).

    Leading batch dims of ``x`` and ``idx`` must agree. Result shape (..., *K, D).
    """
    idx = np.asarray(idx)
    if x.ndim == 2:
        data = x.data[idx]

        def bw(g):
            full = np.zeros_like(x.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, x.shape[-1]))
            x._accum(full)

        return _make(data, (x,), bw)
    if x.ndim != 3:
        raise ShapeError(f"gather_rows: expected rank 2 or 3 input, got {x.shape}")
    b, n, d = x.shape
    if idx.shape[0] != b:
        raise ShapeError(f"gather_rows: batch mismatch {x.shape} vs index {idx.shape}")
    flat = (idx.reshape(b, -1) + (np.arange(b) * n)[:, None]).reshape(-1)
    data = x.data.reshape(b * n, d)[flat].reshape(idx.shape + (d,))

    def bw(g):
        full = np.zeros((b * n, d))
        np.add.at(full, flat, g.reshape(-1, d))
        x._accum(full.reshape(x.shape))

    return _make(data, (x,), bw)


# -- fused normalisers ------------------------------------------------------
def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accum(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), bw)


def layer_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis to zero mean, unit (biased) variance. No affine part."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    d = x.shape[-1]

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        x._accum(inv * (g - gm - y * gy))

    return _make(y, (x,), bw)


def pairwise_distance(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Euclidean distances between rows of ``a`` (..., N, 3) and ``b`` (..., M, 3).

    ``eps`` under the root keeps the gradient finite at coincident points.
    """
    a, b = as_tensor(a), as_tensor(b)
    diff = a.data[..., :, None, :] - b.data[..., None, :, :]
    dist = np.sqrt((diff * diff).sum(-1) + eps)

    def bw(g):
        w = (g / dist)[..., None] * diff
        if a.requires_grad:
            a._accum(_unbroadcast(w.sum(axis=-2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-w.sum(axis=-3), b.shape))

    return _make(dist, (a, b), bw)
