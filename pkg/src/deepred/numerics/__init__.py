"""Dense float64 tensors with reverse-mode differentiation."""
from .autodiff import (
    DTYPE,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    gather_rows,
    getitem,
    masked_max,
    masked_mean,
    masked_softmax,
    matmul,
    mean,
    mul,
    reshape,
    sigmoid,
    square,
    stack,
    sub,
    sum,
    tanh,
    transpose,
    zero_grads,
)
from .gradcheck import gradient_check

__all__ = [
    "DTYPE", "NonFiniteError", "Parameter", "ShapeError", "Tensor", "add", "as_tensor",
    "backward", "concat", "gather_rows", "getitem", "gradient_check", "masked_max", "masked_mean",
    "masked_softmax", "matmul", "mean", "mul", "reshape", "sigmoid", "square", "stack",
    "sub", "sum", "tanh", "transpose", "zero_grads",
]
