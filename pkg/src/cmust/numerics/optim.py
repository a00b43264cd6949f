from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import DTYPE, NonFiniteError, Tensor, no_grad


class Parameter:
    """A named trainable array with its freeze mask and Adam state."""

    __slots__ = ("name", "tensor", "freeze_mask", "moment1", "moment2", "step_count")

    def __init__(self, name: str, value, freeze_mask: np.ndarray | None = None):
        self.name = name
        self.tensor = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        shape = self.tensor.shape
        if freeze_mask is None:
            freeze_mask = np.zeros(shape, dtype=bool)
        freeze_mask = np.asarray(freeze_mask, dtype=bool)
        if freeze_mask.shape != shape:
            raise ValueError(f"{name}: freeze mask shape {freeze_mask.shape} != {shape}")
        self.freeze_mask = freeze_mask.copy()
        self.moment1 = np.zeros(shape, dtype=DTYPE)
        self.moment2 = np.zeros(shape, dtype=DTYPE)
        self.step_count = 0

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, arr) -> None:
        arr = np.asarray(arr, dtype=DTYPE)
        if arr.shape != self.tensor.shape:
            raise ValueError(f"{self.name}: value shape {arr.shape} != {self.tensor.shape}")
        self.tensor.data = arr.copy()

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def trainable(self) -> bool:
        return not bool(self.freeze_mask.all())

    def reset_state(self) -> None:
        self.moment1[...] = 0.0
        self.moment2[...] = 0.0
        self.step_count = 0

    def __repr__(self) -> str:
        frozen = int(self.freeze_mask.sum())
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={frozen}/{self.freeze_mask.size})"


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update with coupled L2 weight decay.

    Elements with ``freeze_mask`` set keep their value and moments bit-for-bit.
    A parameter with no gradient is an error unless it is fully frozen.
    """
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            raise ValueError(f"missing gradient for trainable parameter {p.name!r}")
        w = p.tensor.data
        live = ~p.freeze_mask
        if weight_decay:
            g = g + weight_decay * w
        p.step_count += 1
        t = p.step_count
        m = np.where(live, beta1 * p.moment1 + (1.0 - beta1) * g, p.moment1)
        v = np.where(live, beta2 * p.moment2 + (1.0 - beta2) * g * g, p.moment2)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        new = np.where(live, w - update, w)
        if not np.isfinite(new).all():
            raise NonFiniteError(f"adam update of {p.name!r} is non-finite")
        p.moment1 = m
        p.moment2 = v
        p.tensor.data = new


def finite_difference_gradient(
    loss_fn: Callable[[], float],
    params: Iterable[Parameter] | Mapping[str, Parameter],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference estimate of d loss / d value for every element.

    ``loss_fn`` is called with no arguments and must read the parameters'
    current values; each element is perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if isinstance(params, Mapping):
        params = params.values()
    out: dict[str, np.ndarray] = {}
    with no_grad():
        for p in params:
            data = p.tensor.data
            est = np.zeros_like(data)
            flat = data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn())
                flat[i] = orig - h
                fm = float(loss_fn())
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"non-finite loss perturbing {p.name}[{i}]")
                est.reshape(-1)[i] = (fp - fm) / (2.0 * h)
            out[p.name] = est
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-8)
