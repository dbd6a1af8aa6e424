"""Registered finite-difference checks for every differentiable op.

Each check builds a small float64 problem, runs the analytic backward pass
and compares it with central differences. Layer outputs are reduced with a
fixed random projection ``sum(out * R)`` so the upstream gradient is ``R``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .anchors import assign_scales
from .head import build_targets, total_loss
from .nn import functional as F
from .nn.gradcheck import GradcheckReport, gradcheck
from .nn.layers import Conv2d, LeakyReLU, Norm, ResidualUnit, freeze_corrections, set_dtype, set_update_stats
from .nn.losses import focal_sigmoid_loss, focal_softmax_loss, sum_squared_loss

F64 = np.float64


def _layer_check(name, layer, x, rng, tol, wrt_params=True) -> list[GradcheckReport]:
    set_dtype(layer, F64)
    set_update_stats(layer, False)
    y = layer.forward(x, True)
    proj = rng.normal(size=y.shape)
    freeze_corrections(layer)
    for _, p in layer.named_params():
        p.zero_grad()
    dx = layer.backward(proj)

    def fn():
        return float(np.sum(layer.forward(x, True) * proj))

    reports = [gradcheck(fn, x, dx, tol, name=f"{name}/input")]
    if wrt_params:
        for pname, p in layer.named_params():
            reports.append(gradcheck(fn, p.value, p.grad.copy(), tol, name=f"{name}/{pname}"))
    return reports


def _conv(stride, kernel):
    def check(rng, tol):
        layer = Conv2d(3, 4, kernel, stride, bias=True, dtype=F64)
        layer.weight.value = rng.normal(0, 0.5, layer.weight.value.shape)
        layer.bias.value = rng.normal(0, 0.1, 4)
        return _layer_check(f"conv{kernel}x{kernel}_s{stride}", layer, rng.normal(size=(2, 5, 5, 3)), rng, tol)

    return check


def _norm(mode):
    def check(rng, tol):
        layer = Norm(3, mode, dtype=F64)
        layer.gamma.value = rng.uniform(0.5, 1.5, 3)
        layer.beta.value = rng.normal(0, 0.2, 3)
        layer.moving_mean.value = rng.normal(0, 0.5, 3)
        layer.moving_var.value = rng.uniform(0.3, 3.0, 3)
        return _layer_check(f"{mode}_train", layer, rng.normal(1.0, 2.0, size=(2, 3, 3, 3)), rng, tol)

    return check


def _residual(rng, tol):
    layer = ResidualUnit(4, "bn")
    set_dtype(layer, F64)
    for _, p in layer.named_params():
        if p.value.ndim == 4:
            p.value = rng.normal(0, 0.5, p.value.shape)
    return _layer_check("residual_unit", layer, rng.normal(size=(1, 4, 4, 4)), rng, tol)


def _leaky(rng, tol):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-2] += 0.1  # keep away from the kink
    return _layer_check("leaky_relu", LeakyReLU(), x, rng, tol, wrt_params=False)


def _sigmoid(rng, tol):
    x = rng.normal(0, 2, size=(3, 4))
    proj = rng.normal(size=x.shape)
    s = F.sigmoid(x)
    return [gradcheck(lambda: float(np.sum(F.sigmoid(x) * proj)), x, proj * s * (1 - s), tol, name="sigmoid")]


def _softmax(rng, tol):
    x = rng.normal(0, 2, size=(3, 5))
    proj = rng.normal(size=x.shape)
    p = F.softmax(x)
    dx = p * (proj - np.sum(proj * p, axis=-1, keepdims=True))
    return [gradcheck(lambda: float(np.sum(F.softmax(x) * proj)), x, dx, tol, name="softmax")]


def _focal_sigmoid(rng, tol):
    y = rng.uniform(0.05, 0.95, size=(4, 6))
    t = rng.random(y.shape) < 0.3
    _, g = focal_sigmoid_loss(y, t, 2.0)
    return [gradcheck(lambda: float(focal_sigmoid_loss(y, t, 2.0)[0]), y, g, tol, name="focal_sigmoid")]


def _focal_softmax(rng, tol):
    p = F.softmax(rng.normal(size=(5, 4)))
    onehot = np.eye(4)[rng.integers(0, 4, 5)]
    _, g = focal_softmax_loss(p, onehot, 2.0)
    return [gradcheck(lambda: float(focal_softmax_loss(p, onehot, 2.0)[0]), p, g, tol, name="focal_softmax")]


def _sse(rng, tol):
    pred, target = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, g = sum_squared_loss(pred, target)
    return [gradcheck(lambda: float(sum_squared_loss(pred, target)[0]), pred, g, tol, name="sum_squared")]


def _head_loss(rng, tol):
    size, n_cls = 64, 3
    anchors = assign_scales(np.array([[6, 8], [10, 5], [9, 14], [16, 12], [20, 30], [28, 18],
                                      [36, 40], [50, 30], [44, 58]], dtype=F64))
    boxes = [np.array([[4.0, 6.0, 20.0, 18.0], [30.0, 28.0, 60.0, 62.0]]), np.array([[10.0, 12.0, 40.0, 30.0]])]
    cats = [np.array([0, 2]), np.array([1])]
    targets = build_targets(boxes, cats, anchors, size, n_cls)
    outputs = [rng.normal(0, 1.0, size=(2, size // s, size // s, 3, 5 + n_cls)) for s in (8, 16, 32)]
    _, _, grads = total_loss(outputs, targets, None, 2.0)
    reports = []
    for lvl, (out, g) in enumerate(zip(outputs, grads)):
        fn = lambda: float(total_loss(outputs, targets, None, 2.0)[0])  # noqa: E731
        reports.append(gradcheck(fn, out, g, tol, name=f"head_loss/level{lvl}"))
    return reports


CHECKS: dict[str, Callable] = {
    "conv1x1_s1": _conv(1, 1),
    "conv3x3_s1": _conv(1, 3),
    "conv3x3_s2": _conv(2, 3),
    "bn_train": _norm("bn"),
    "br_train": _norm("br"),
    "residual_unit": _residual,
    "leaky_relu": _leaky,
    "sigmoid": _sigmoid,
    "softmax": _softmax,
    "focal_sigmoid": _focal_sigmoid,
    "focal_softmax": _focal_softmax,
    "sum_squared": _sse,
    "head_loss": _head_loss,
}


def run_suite(tol: float = 1e-5, seed: int = 0, only=None) -> dict:
    """Run every registered check; ``passed`` is true only if all pass."""
    reports = []
    for i, (name, check) in enumerate(CHECKS.items()):
        if only and name not in only:
            continue
        reports.extend(check(np.random.default_rng([seed, i]), tol))
    return {
        "passed": all(r.passed for r in reports),
        "tol": tol,
        "max_rel_err": max(r.max_rel_err for r in reports),
        "checks": [r.to_json() for r in reports],
    }
