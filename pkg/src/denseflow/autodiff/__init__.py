"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import _malloc  # noqa: F401  (allocator tuning, import side effect)

from .gradcheck import GradcheckReport, gradcheck, numerical_gradient, relative_error
from .ops import (
    BatchNormState,
    ShapeError,
    add,
    affine_concat,
    avgpool2d,
    batchnorm2d,
    concat,
    conv2d,
    conv_transpose2d,
    dropout,
    leaky_relu,
    maxpool2d,
    mean,
    mul,
    neg,
    normalize2d,
    pow,
    reduce_sum,
    reshape,
    slice_channels,
    sub,
)
from .tensor import Tensor, backward, is_grad_enabled, no_grad, tape_order

__all__ = [
    "BatchNormState",
    "GradcheckReport",
    "ShapeError",
    "Tensor",
    "add",
    "affine_concat",
    "avgpool2d",
    "backward",
    "batchnorm2d",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "dropout",
    "gradcheck",
    "is_grad_enabled",
    "leaky_relu",
    "maxpool2d",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "normalize2d",
    "numerical_gradient",
    "pow",
    "reduce_sum",
    "relative_error",
    "reshape",
    "slice_channels",
    "sub",
    "tape_order",
]
