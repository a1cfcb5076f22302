"""Minimal reverse-mode autodiff over dense numpy arrays."""

from .tensor import (
    AutodiffError,
    Graph,
    NonFiniteError,
    OP_TABLE,
    Tensor,
    active_graph,
    add,
    as_tensor,
    backward,
    bmm,
    broadcast_to,
    concat,
    conv1d,
    div,
    dropout,
    exp,
    forward_op,
    gelu,
    grad_enabled,
    layernorm,
    log,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    relu,
    reshape,
    scale_shift,
    add_scaled,
    set_strict_finite,
    silu,
    slice_,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
    zero_grads,
)
from .optim import Adam, AdamState, adam_step
from .checks import finite_difference_grad, gradient_check

__all__ = [
    "AutodiffError",
    "Graph",
    "NonFiniteError",
    "OP_TABLE",
    "Tensor",
    "active_graph",
    "add",
    "as_tensor",
    "backward",
    "bmm",
    "broadcast_to",
    "concat",
    "conv1d",
    "div",
    "dropout",
    "exp",
    "forward_op",
    "gelu",
    "grad_enabled",
    "layernorm",
    "log",
    "matmul",
    "mean",
    "mse",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale_shift",
    "add_scaled",
    "set_strict_finite",
    "silu",
    "slice_",
    "softmax",
    "sub",
    "sum_",
    "tanh",
    "transpose",
    "zero_grads",
    "Adam",
    "AdamState",
    "adam_step",
    "finite_difference_grad",
    "gradient_check",
]
