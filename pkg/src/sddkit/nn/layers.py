"""Layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Param.grad`` during ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import functional as F

LEAKY_SLOPE = 0.1
BN_MOMENTUM = 0.03
BN_EPS = 1e-5
BR_RMAX = 1.5
BR_DMAX = 0.5


@dataclass
class Param:
    value: np.ndarray
    decay: bool = True
    grad: np.ndarray = field(init=False, repr=False)
    m: np.ndarray = field(init=False, repr=False)
    v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


class Layer:
    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, child in self._children():
            yield from child.named_params(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Buffer"]]:
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Layer):
                yield name, val
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield f"{name}.{i}", item

    def norms(self) -> Iterator["Norm"]:
        if isinstance(self, Norm):
            yield self
        for _, child in self._children():
            yield from child.norms()

    def forward(self, x, train: bool = True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Buffer:
    """Non-trainable state tensor (moving statistics)."""

    def __init__(self, value: np.ndarray):
        self.value = value


class Conv2d(Layer):
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1, bias: bool = False,
                 dtype=np.float32):
        if kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {kernel}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.kernel, self.stride = kernel, stride
        self.cin, self.cout = cin, cout
        self.weight = Param(np.zeros((kernel, kernel, cin, cout), dtype=dtype))
        self.bias = Param(np.zeros(cout, dtype=dtype), decay=False) if bias else None
        self._cache = None

    @property
    def fan_in(self) -> int:
        return self.kernel * self.kernel * self.cin

    @property
    def fan_out(self) -> int:
        return self.kernel * self.kernel * self.cout

    def named_params(self, prefix=""):
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias

    def forward(self, x, train=True):
        out, cols = F.conv2d_forward(x, self.weight.value, self.stride)
        if self.bias is not None:
            out = out + self.bias.value
        self._cache = (cols, x.shape)
        return out

    def backward(self, dy):
        cols, shape = self._cache
        dx, dw = F.conv2d_backward(dy, cols, shape, self.weight.value, self.stride)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += dy.reshape(-1, self.cout).sum(axis=0)
        return dx


class Norm(Layer):
    """Per-channel batch normalisation, or batch renormalisation when
    ``mode == "br"``.

    Training normalises with the batch statistics; renormalisation then
    applies the correction ``x_hat * r + d`` with ``r`` and ``d`` computed
    from the moving statistics, clipped, and held constant in the backward
    pass. With ``r = 1`` and ``d = 0`` both modes run the same arithmetic.
    Inference normalises with the moving statistics in both modes.
    """

    def __init__(self, channels: int, mode: str = "bn", momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS, r_max: float = BR_RMAX, d_max: float = BR_DMAX,
                 dtype=np.float32):
        if mode not in ("bn", "br"):
            raise ValueError(f"norm mode must be 'bn' or 'br', got {mode!r}")
        self.mode = mode
        self.momentum, self.eps = momentum, eps
        self.r_max, self.d_max = r_max, d_max
        self.gamma = Param(np.ones(channels, dtype=dtype), decay=False)
        self.beta = Param(np.zeros(channels, dtype=dtype), decay=False)
        self.moving_mean = Buffer(np.zeros(channels, dtype=dtype))
        self.moving_var = Buffer(np.ones(channels, dtype=dtype))
        self.update_stats = True
        self.last_r = None
        self.last_d = None
        # (r, d) pinned from outside, e.g. to finite-difference the
        # train-phase map with the corrections held fixed
        self.fixed_correction = None
        self._cache = None

    def named_params(self, prefix=""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_buffers(self, prefix=""):
        yield prefix + "moving_mean", self.moving_mean
        yield prefix + "moving_var", self.moving_var

    def correction(self, mu: np.ndarray, std: np.ndarray):
        """Clipped (r, d) for batch statistics ``mu`` and ``std``."""
        if self.mode == "bn":
            one = np.ones_like(mu)
            return one, np.zeros_like(mu)
        sigma = np.sqrt(self.moving_var.value + self.eps)
        r = np.clip(std / sigma, 1.0 / self.r_max, self.r_max)
        d = np.clip((mu - self.moving_mean.value) / sigma, -self.d_max, self.d_max)
        return r.astype(mu.dtype), d.astype(mu.dtype)

    def forward(self, x, train=True):
        g, b = self.gamma.value, self.beta.value
        if not train:
            inv = 1.0 / np.sqrt(self.moving_var.value + self.eps)
            return (x - self.moving_mean.value) * (g * inv) + b
        axes = tuple(range(x.ndim - 1))
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        std = np.sqrt(var + self.eps)
        if self.fixed_correction is not None:
            r, d = self.fixed_correction
        else:
            r, d = self.correction(mu, std)
        xhat = (x - mu) / std
        z = xhat * r + d
        if self.update_stats:
            m = self.momentum
            self.moving_mean.value = (1 - m) * self.moving_mean.value + m * mu
            self.moving_var.value = (1 - m) * self.moving_var.value + m * var
        self.last_r, self.last_d = r, d
        self._cache = (xhat, z, std, r)
        return z * g + b

    def backward(self, dy):
        xhat, z, std, r = self._cache
        axes = tuple(range(dy.ndim - 1))
        self.gamma.grad += (dy * z).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * (self.gamma.value * r)
        mean_d = dxhat.mean(axis=axes)
        mean_dx = (dxhat * xhat).mean(axis=axes)
        return (dxhat - mean_d - xhat * mean_dx) / std


class LeakyReLU(Layer):
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope
        self._x = None

    def forward(self, x, train=True):
        self._x = x
        return F.leaky_relu(x, self.slope)

    def backward(self, dy):
        return F.leaky_relu_grad(self._x, dy, self.slope)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class ConvBlock(Sequential):
    """conv -> norm -> leaky ReLU."""

    def __init__(self, cin, cout, kernel=3, stride=1, norm="bn", dtype=np.float32):
        super().__init__(
            Conv2d(cin, cout, kernel, stride, dtype=dtype),
            Norm(cout, norm, dtype=dtype),
            LeakyReLU(),
        )


class ResidualUnit(Layer):
    """x + block(x) with block = 1x1 conv (halving channels) then 3x3 conv."""

    def __init__(self, channels: int, norm: str = "bn", dtype=np.float32):
        if channels % 2:
            raise ValueError(f"residual unit needs an even channel count, got {channels}")
        self.channels = channels
        self.block = Sequential(
            ConvBlock(channels, channels // 2, 1, 1, norm, dtype),
            ConvBlock(channels // 2, channels, 3, 1, norm, dtype),
        )

    def forward(self, x, train=True):
        if x.shape[-1] != self.channels:
            raise ValueError(f"residual unit expects {self.channels} channels, got {x.shape[-1]}")
        return x + self.block.forward(x, train)

    def backward(self, dy):
        return dy + self.block.backward(dy)


class Upsample2x(Layer):
    def forward(self, x, train=True):
        return F.upsample2x(x)

    def backward(self, dy):
        return F.upsample2x_backward(dy)


def set_dtype(layer: Layer, dtype) -> None:
    for _, p in layer.named_params():
        p.astype(dtype)
    for _, b in layer.named_buffers():
        b.value = b.value.astype(dtype)


def zero_grads(layer: Layer) -> None:
    for _, p in layer.named_params():
        p.zero_grad()


def set_update_stats(layer: Layer, flag: bool) -> None:
    for norm in layer.norms():
        norm.update_stats = flag


def freeze_corrections(layer: Layer, frozen: bool = True) -> None:
    """Pin every norm's (r, d) to the values of its last training forward."""
    for norm in layer.norms():
        norm.fixed_correction = (norm.last_r, norm.last_d) if frozen else None
