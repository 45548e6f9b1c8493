"""Minimal NCHW tensor library with reverse-mode autodiff."""
from .core import (Tensor, add, as_tensor, backward, concat, div, erf, exp, get_default_dtype, log,
                   mul, no_grad, power, precision, relu, set_default_dtype, sigmoid, softplus, sqrt,
                   square, sub, tabs, tmean, topological_order, tsum)
from .functional import (batch_norm, bilinear_upsample_2x, conv2d, l1_adjacent_penalty,
                         locally_connected, max_pool2x2, pad2d)
from .kernels import BACKEND
from .nn import (BatchNorm2d, Conv2d, ConvBNReLU, LocallyConnected, Module, Parameter,
                 truncated_normal)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "add", "as_tensor", "backward", "concat", "div", "erf", "exp", "get_default_dtype",
    "log", "mul", "no_grad", "power", "precision", "relu", "set_default_dtype", "sigmoid",
    "softplus", "sqrt", "square", "sub", "tabs", "tmean", "topological_order", "tsum",
    "batch_norm", "bilinear_upsample_2x", "conv2d", "l1_adjacent_penalty", "locally_connected",
    "max_pool2x2", "pad2d", "BACKEND", "BatchNorm2d", "Conv2d", "ConvBNReLU", "LocallyConnected",
    "Module", "Parameter", "truncated_normal", "load_checkpoint", "save_checkpoint",
]
