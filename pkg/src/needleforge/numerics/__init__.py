"""Dense tensors, reverse-mode autodiff and finite-difference checking."""

from .conv import batch_norm, conv1d, conv2d, global_avg_pool, same_padding
from .gradcheck import grad_check, grad_check_many
from .tensor import (
    ContractError,
    DimensionError,
    Node,
    Tape,
    Tensor,
    activation,
    add,
    active_tape,
    backward,
    concat,
    div,
    exp,
    getitem,
    make_multi_op,
    make_op,
    matmul,
    mean,
    mul,
    neg,
    parameter,
    power,
    relu,
    reshape,
    sigmoid,
    split,
    square,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
    unstack,
)

__all__ = [
    "ContractError", "DimensionError", "Node", "Tape", "Tensor", "activation", "active_tape", "add",
    "backward", "batch_norm", "concat", "conv1d", "conv2d", "div", "exp", "getitem", "global_avg_pool",
    "grad_check", "grad_check_many", "make_multi_op", "make_op", "matmul", "mean", "mul", "neg",
    "parameter", "power", "relu", "reshape", "same_padding", "sigmoid", "split", "square", "stack",
    "sub", "tanh", "transpose", "tsum", "unstack",
]
