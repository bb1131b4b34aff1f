"""Minimal reverse-mode autodiff over N x C x H x W arrays."""
from .conv import conv2d, conv2d_reference, output_size, same_padding
from .functional import (
    add,
    batchnorm,
    concat_channels,
    dropout,
    maxpool2d,
    one_hot,
    relu,
    scale,
    softmax_cross_entropy,
    tensor_sum,
    upsample_nearest,
)
from .gradcheck import check_gradients, numerical_grad, rel_error
from .tensor import NumericalError, Tape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Tensor", "Tape", "NumericalError", "backward", "no_grad", "is_grad_enabled",
    "conv2d", "conv2d_reference", "output_size", "same_padding",
    "add", "batchnorm", "concat_channels", "dropout", "maxpool2d", "one_hot", "relu",
    "scale", "softmax_cross_entropy", "tensor_sum", "upsample_nearest",
    "check_gradients", "numerical_grad", "rel_error",
]
