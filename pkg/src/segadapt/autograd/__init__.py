"""Minimal reverse-mode autodiff engine and Adam optimizer."""

from .functional import (
    EmptyLossWarning,
    clip,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    dropout,
    instance_norm,
    l1_distance,
    leaky_relu,
    log,
    relu,
    sigmoid,
    softmax,
    tabs,
    tanh,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, concat, is_grad_enabled, matmul, mean, no_grad, reshape, tsum

__all__ = [
    "Adam",
    "AdamState",
    "EmptyLossWarning",
    "Tensor",
    "adam_step",
    "as_tensor",
    "clip",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "cross_entropy",
    "dropout",
    "instance_norm",
    "is_grad_enabled",
    "l1_distance",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "tabs",
    "tanh",
    "tsum",
]
