"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

STEP = 1e-5
# Denominator floor of the relative error, so gradients near zero are
# compared absolutely instead of amplifying finite-difference round-off.
REL_FLOOR = 1e-3


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    tol: float
    fault: str | None = None

    @property
    def passed(self) -> bool:
        return self.fault is None and self.max_rel_err <= self.tol

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "max_abs_err": self.max_abs_err,
            "n_checked": self.n_checked,
            "tol": self.tol,
            "fault": self.fault,
        }


def numeric_grad(fn: Callable[[], float], x: np.ndarray, index, step: float = STEP) -> float:
    """d fn / d x[index] by central differences; ``x`` is perturbed in place."""
    orig = x[index]
    x[index] = orig + step
    fp = fn()
    x[index] = orig - step
    fm = fn()
    x[index] = orig
    return (fp - fm) / (2 * step)


def gradcheck(
    fn: Callable[[], float],
    x: np.ndarray,
    analytic: np.ndarray,
    tol: float = 1e-5,
    step: float = STEP,
    max_coords: int | None = None,
    seed: int = 0,
    name: str = "",
) -> GradcheckReport:
    """Compare ``analytic`` against central differences of ``fn`` wrt ``x``.

    ``fn`` takes no arguments and reads ``x`` (which is perturbed in place and
    restored). With ``max_coords`` only a random subset of coordinates is
    probed. ``x`` must be float64.
    """
    if x.dtype != np.float64:
        raise TypeError(f"gradcheck needs float64 inputs, got {x.dtype}")
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"analytic grad shape {analytic.shape} != input shape {x.shape}")
    indices = list(np.ndindex(x.shape))
    if max_coords is not None and len(indices) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(indices), size=max_coords, replace=False)
        indices = [indices[i] for i in sorted(pick)]
    max_rel = max_abs = 0.0
    for idx in indices:
        num = numeric_grad(fn, x, idx, step)
        if not np.isfinite(num):
            return GradcheckReport(name, np.inf, np.inf, len(indices), tol, f"non-finite output at {idx}")
        a = analytic[idx]
        err = abs(a - num)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / max(abs(a), abs(num), REL_FLOOR))
    return GradcheckReport(name, float(max_rel), float(max_abs), len(indices), tol)
