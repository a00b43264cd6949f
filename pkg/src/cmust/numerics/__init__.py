from .checkpoint import load_checkpoint, sanitize, save_checkpoint
from .optim import Parameter, adam_step, finite_difference_gradient, relative_error, zero_grad
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    broadcast_to,
    concat,
    embedding,
    getitem,
    huber_loss,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    swapaxes,
    transpose,
)

__all__ = [
    "NonFiniteError",
    "Parameter",
    "Tensor",
    "adam_step",
    "add",
    "broadcast_to",
    "concat",
    "embedding",
    "finite_difference_gradient",
    "getitem",
    "huber_loss",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relative_error",
    "relu",
    "reshape",
    "sanitize",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "square",
    "swapaxes",
    "transpose",
    "zero_grad",
]
