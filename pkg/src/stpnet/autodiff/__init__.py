"""Minimal reverse-mode automatic differentiation over dense tensors."""
from .functional import (
    batchnorm2d,
    concat,
    conv2d,
    cosine_normalize,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    maxpool2d,
    mean,
    relu,
    scaled_dot_attention,
    sigmoid,
    softmax,
    softplus,
    upsample2x,
)
from .gradcheck import GradCheckReport, grad_check
from .tensor import Tape, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Tape",
    "Tensor",
    "as_tensor",
    "batchnorm2d",
    "concat",
    "conv2d",
    "cosine_normalize",
    "gelu",
    "grad_check",
    "GradCheckReport",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "log_softmax",
    "maxpool2d",
    "mean",
    "no_grad",
    "relu",
    "scaled_dot_attention",
    "sigmoid",
    "softmax",
    "softplus",
    "upsample2x",
]
