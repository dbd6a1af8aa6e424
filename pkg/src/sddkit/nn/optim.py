"""Adam with coupled L2 weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .layers import Param


class Adam:
    """Bias-corrected Adam. Weight decay is added to the gradient
    (``g + wd * w``) before the moment update, for params flagged ``decay``.
    """

    def __init__(self, params: Iterable[Param], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p in self.params:
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.value
            p.m *= b1
            p.m += (1 - b1) * g
            p.v *= b2
            p.v += (1 - b2) * (g * g)
            update = (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)
            p.value -= (self.lr * update).astype(p.value.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr}
