from .tensor import Function, Tensor, as_tensor, no_grad, parameter
from .ops import (
    concat,
    cross_entropy,
    expand,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    softmax,
    take,
    take_along,
)
from .gradcheck import GradCheckReport, grad_check, numeric_grad

__all__ = [
    "Function",
    "Tensor",
    "as_tensor",
    "no_grad",
    "parameter",
    "concat",
    "cross_entropy",
    "expand",
    "gelu",
    "layer_norm",
    "log_softmax",
    "matmul",
    "softmax",
    "take",
    "take_along",
    "GradCheckReport",
    "grad_check",
    "numeric_grad",
]
