"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the forecasting model needs are provided. Every op checks
its output for NaN/Inf and raises :class:`NonFiniteError` instead of letting
non-finite values propagate.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a self dot product is a cheap screen: NaN/Inf always survive it
    flat = arr.reshape(-1)
    if flat.size and not np.isfinite(np.dot(flat, flat)) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _rowsum(x2: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array (faster than ``sum(axis=0)`` via BLAS)."""
    return np.ones(x2.shape[0]) @ x2


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple[Tensor, ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = _check_finite(arr, name or "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ops that only move or copy existing values; finite in, finite out
_MOVES = frozenset({"reshape", "transpose", "swapaxes", "getitem", "concat", "broadcast"})


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if op not in _MOVES:
        _check_finite(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.name = op
        return out
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.name = op
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def square(x: Tensor) -> Tensor:
    d = x.data
    return _make(d * d, (x,), lambda g: (2.0 * g * d,), "square")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _make(np.array(x.data[idx]), (x,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),), "broadcast"
    )


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ValueError(f"linear: input width {xd.shape[-1]} != weight rows {wd.shape[0]}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (_rowsum(g2) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(*lead, wd.shape[1]), parents, backward, "linear")


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]`` with scatter-add gradient."""
    index = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise IndexError(f"embedding index out of range [0, {rows})")

    def backward(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[index], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# normalisation / attention pieces
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    d = x.data
    if d.size == 0 or d.shape[axis] == 0:
        raise ValueError("softmax of an empty axis")
    if axis not in (-1, d.ndim - 1):
        return swapaxes(softmax(swapaxes(x, axis, -1), -1), axis, -1)
    n = d.shape[-1]
    ones = np.ones(n)
    z = np.exp(d - d.max(axis=-1, keepdims=True))
    out = z / (z @ ones)[..., None]

    def backward(g):
        return (out * (g - ((g * out) @ ones)[..., None]),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.data
    n = d.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({n},)")
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    avg = np.full(n, 1.0 / n)
    x2 = d.reshape(-1, n)
    xc = x2 - (x2 @ avg)[:, None]
    var = (xc * xc) @ avg
    inv = (1.0 / np.sqrt(var + eps))[:, None]
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        g2 = g.reshape(-1, n)
        gx_hat = g2 * gd
        gx = inv * (
            gx_hat
            - (gx_hat @ avg)[:, None]
            - xhat * ((gx_hat * xhat) @ avg)[:, None]
        )
        return gx.reshape(d.shape), _rowsum(g2 * xhat), _rowsum(g2)

    out = (xhat * gd + bias.data).reshape(d.shape)
    return _make(out, (x, gain, bias), backward, "layer_norm")


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean Huber loss: ½r² inside ``delta``, ``delta(|r| - ½delta)`` outside."""
    target = _lift(target)
    if pred.shape != target.shape:
        raise ValueError(f"huber_loss: shape mismatch {pred.shape} vs {target.shape}")
    if delta <= 0:
        raise ValueError("huber_loss: delta must be positive")
    r = pred.data - target.data
    a = np.abs(r)
    quad = a < delta
    vals = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    n = r.size

    def backward(g):
        dr = np.where(quad, r, delta * np.sign(r)) * (g / n)
        return dr, -dr

    return _make(np.asarray(vals.mean()), (pred, target), backward, "huber_loss")
