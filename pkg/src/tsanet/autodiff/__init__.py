from . import ops
from .gradcheck import analytic_grad, gradcheck, numerical_grad, relative_error
from .ops import (
    concat,
    conv2d,
    cos,
    gather_rows,
    grid_sample_bilinear,
    matmul,
    relu,
    resize_bilinear,
    scale,
    sigmoid,
    sin,
    softmax_cross_entropy,
)
from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Tape",
    "Tensor",
    "analytic_grad",
    "as_tensor",
    "concat",
    "conv2d",
    "cos",
    "default_dtype",
    "gather_rows",
    "get_default_dtype",
    "gradcheck",
    "grid_sample_bilinear",
    "is_grad_enabled",
    "matmul",
    "no_grad",
    "numerical_grad",
    "ops",
    "relative_error",
    "relu",
    "resize_bilinear",
    "scale",
    "set_default_dtype",
    "sigmoid",
    "sin",
    "softmax_cross_entropy",
]
