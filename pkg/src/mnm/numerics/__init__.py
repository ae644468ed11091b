"""Double-precision tensor engine with reverse-mode differentiation."""

from . import functional
from .functional import conv2d, dropout, layer_norm, linear, softmax
from .gradcheck import check_gradients, numerical_gradient, relative_error
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, Parameter, ResidualAttention
from .tensor import (
    GradientError,
    ShapeError,
    Tensor,
    abs_,
    add,
    clip,
    concat,
    div,
    elementwise,
    exp,
    getitem,
    grad,
    log,
    matmul,
    max_,
    maximum,
    mean,
    minimum,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    square,
    stack,
    sub,
    sum_,
    transpose,
)
