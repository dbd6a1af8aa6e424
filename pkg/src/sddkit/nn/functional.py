"""Stateless array kernels. Layout is NHWC throughout."""

from __future__ import annotations

import math

import numpy as np


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(output size, pad before, pad after) for 'same' padding; output = ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1):
    """Cross-correlation of ``x`` (N, H, W, C) with ``w`` (k, k, C, F).

    Returns the output and the im2col matrix needed by the backward pass.
    """
    n, h, wd, c = x.shape
    k, k2, cin, f = w.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {k}x{k2}")
    if cin != c:
        raise ValueError(f"input has {c} channels but kernel expects {cin}")
    if h < k or wd < k:
        raise ValueError(f"spatial dims {h}x{wd} smaller than kernel {k}")
    if k == 1 and stride == 1:
        cols = x.reshape(-1, c)
        return (cols @ w.reshape(c, f)).reshape(n, h, wd, f), cols
    ho, pt, pb = same_padding(h, k, stride)
    wo, pl, pr = same_padding(wd, k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    out = cols @ w.reshape(k * k * c, f)
    return out.reshape(n, ho, wo, f), cols


def conv2d_backward(dy: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray, stride: int = 1):
    """Gradients (dx, dw) of the convolution given the cached im2col matrix."""
    n, h, wd, c = x_shape
    k, _, _, f = w.shape
    dy2 = dy.reshape(-1, f)
    dw = (cols.T @ dy2).reshape(w.shape)
    dcols = dy2 @ w.reshape(-1, f).T
    if k == 1 and stride == 1:
        return dcols.reshape(x_shape), dw
    ho, pt, pb = same_padding(h, k, stride)
    wo, pl, pr = same_padding(wd, k, stride)
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + pt + pb, wd + pl + pr, c), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    return dxp[:, pt : pt + h, pl : pl + wd, :], dw


def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, x, x * slope)


def leaky_relu_grad(x: np.ndarray, dy: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, dy, dy * slope)


def sigmoid(x):
    x = np.asarray(x)
    if x.ndim == 0:
        v = float(x)
        return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    """log(sigmoid(x)) without overflow: -softplus(-x)."""
    return -np.logaddexp(0, -x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))
