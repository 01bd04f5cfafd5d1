"""Minimal tape-based reverse-mode autodiff over float64 numpy arrays.

Every op builds its output eagerly and records a closure that maps the
output gradient to input gradients. ``backward`` walks the recorded graph in
reverse topological order, accumulating gradients additively across fan-out.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

# "Effective -inf": finite so that 0 * sentinel stays 0 instead of NaN.
NEG_INF = -np.finfo(np.float64).max
_MASKED_ROW_THRESHOLD = NEG_INF / 2

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """Raised when backward is called on an invalid loss."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "masked_rows")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.masked_rows = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def broadcast_add(matrix, vector) -> Tensor:
    """Add ``vector`` to every row of ``matrix`` (vector length = last dim)."""
    matrix, vector = as_tensor(matrix), as_tensor(vector)
    if vector.shape[-1:] != matrix.shape[-1:]:
        raise DimensionError(
            f"broadcast_add: vector shape {vector.shape} incompatible with matrix shape {matrix.shape}")
    return add(matrix, vector)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one 2-D product; much faster than batched matmul
        k, n = b.shape
        a2 = np.ascontiguousarray(a.data).reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            g2 = np.ascontiguousarray(g).reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), bw, "matmul")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(out, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    basic = isinstance(index, (int, slice, type(Ellipsis))) or (
        isinstance(index, tuple) and all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in index))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


def gather(a, index) -> Tensor:
    """``a[index]`` for an index that selects each element at most once."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), bw, "gather")


def scatter(a, index, shape: tuple) -> Tensor:
    """Inverse of ``gather``: place ``a`` at ``index`` of a zero array of ``shape``."""
    a = as_tensor(a)
    out = np.zeros(shape)
    out[index] = a.data
    return _make(out, (a,), lambda g: (g[index],), "scatter")


def take_rows(table, indices) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` selected by integer ``indices``."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"lookup index out of range for table with {table.shape[0]} rows: {idx.tolist()}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), bw, "take_rows")


def concat_lastdim(tensors: Iterable) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat_lastdim: leading shapes differ: {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=-1))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tensors, bw, "concat")


# -- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- elementwise unary -----------------------------------------------------

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- fused ops -------------------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    """Max-stabilised softmax. Rows that are entirely masked produce zeros.

    Masked positions may hold ``-inf`` or the ``NEG_INF`` sentinel. The
    boolean array of fully-masked rows is attached as ``out.masked_rows``.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: needs a non-empty last dimension, got {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    dead = m <= _MASKED_ROW_THRESHOLD
    m = np.where(dead, 0.0, m)
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(x.data - m)
    e = np.where(dead, 0.0, e)
    s = e.sum(axis=-1, keepdims=True)
    out = e / np.where(s == 0.0, 1.0, s)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    res = _make(out, (x,), bw, "softmax")
    res.masked_rows = dead[..., 0]
    return res


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if eps == 0:
        xhat = np.where(var == 0, 0.0, xhat)
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gain, bias), bw, "layer_norm")


# -- reverse pass ----------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _first_nonfinite(order: list[Tensor]) -> Tensor | None:
    for node in order:
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Leaf gradients accumulate into any existing ``.grad``; intermediate
    gradients are overwritten.
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    if not np.isfinite(loss.data).all():
        bad = _first_nonfinite(order)
        raise BackwardError(f"non-finite loss; first non-finite value produced by op '{bad.op}'")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
