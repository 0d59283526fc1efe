"""Minimal dense-tensor engine with reverse-mode differentiation."""

from . import fdrt, functional
from .functional import (
    avgpool2d,
    batchnorm,
    cast,
    channel_mean,
    channel_var,
    conv2d,
    cross_entropy,
    flatten,
    global_avgpool,
    kl_div,
    l2norm,
    linear,
    log_softmax_np,
    maxpool2d,
    relu,
    softmax_np,
)
from .precision import FULL32, HALF16, overflow_monitor
from .tensor import Function, Tensor, TapeNode, backward, no_grad

__all__ = [
    "FULL32", "HALF16", "Function", "Tensor", "TapeNode", "avgpool2d", "backward",
    "batchnorm", "cast", "channel_mean", "channel_var", "conv2d", "cross_entropy", "fdrt",
    "flatten", "functional", "global_avgpool", "kl_div", "l2norm", "linear",
    "log_softmax_np", "maxpool2d", "no_grad", "overflow_monitor", "relu", "softmax_np",
]
