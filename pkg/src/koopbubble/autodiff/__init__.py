"""Minimal float64 tensor engine with reverse-mode differentiation."""

from .functional import (
    conv2d, dense, downsample_conv2x2, flatten, maxpool2d, mse, relu, residual_block, transposed_conv2d,
)
from .gradcheck import gradient_check, numerical_gradient
from .optim import AdamState, adam_step
from .paramfile import load_parameters, save_parameters
from .tensor import Tensor, as_tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Tensor", "as_tensor", "backward", "no_grad", "is_grad_enabled",
    "dense", "conv2d", "maxpool2d", "transposed_conv2d", "downsample_conv2x2",
    "relu", "mse", "flatten", "residual_block",
    "AdamState", "adam_step",
    "gradient_check", "numerical_gradient",
    "save_parameters", "load_parameters",
]
