"""Minimal differentiable numeric core (NHWC, float32 with a float64 mode)."""

from .checkpoint import load_tensors, save_tensors
from .functional import leaky_relu, log_softmax, sigmoid, softmax
from .gradcheck import GradcheckReport, gradcheck
from .layers import (
    Conv2d,
    ConvBlock,
    LeakyReLU,
    Norm,
    Param,
    ResidualUnit,
    Sequential,
    Upsample2x,
)
from .losses import (
    binary_cross_entropy,
    focal_sigmoid_loss,
    focal_sigmoid_with_logits,
    focal_softmax_loss,
    focal_softmax_with_logits,
    softmax_cross_entropy,
    sum_squared_loss,
)
from .optim import Adam

__all__ = [
    "Adam",
    "Conv2d",
    "ConvBlock",
    "GradcheckReport",
    "LeakyReLU",
    "Norm",
    "Param",
    "ResidualUnit",
    "Sequential",
    "Upsample2x",
    "binary_cross_entropy",
    "focal_sigmoid_loss",
    "focal_sigmoid_with_logits",
    "focal_softmax_loss",
    "focal_softmax_with_logits",
    "gradcheck",
    "leaky_relu",
    "load_tensors",
    "log_softmax",
    "save_tensors",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "sum_squared_loss",
]
