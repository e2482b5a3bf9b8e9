"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import Layer

LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_error: float
    flagged: list[int] = field(default_factory=list)


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck]

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return not any(p.flagged for p in self.params)

    def rows(self):
        for p in self.params:
            yield p.name, p.size, p.max_rel_error, len(p.flagged)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def gradient_check(model: Layer, loss_fn: LossFn, x: np.ndarray, target: np.ndarray,
                   tolerance: float = 1e-4, eps: float = 1e-5) -> GradCheckReport:
    """Compare backprop gradients with central differences for every parameter entry."""
    params = model.params()
    for p in params.values():
        p.zero_grad()
    _, dout = loss_fn(model.forward(x), target)
    model.backward(dout)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    for p in params.values():
        p.zero_grad()

    def loss_at() -> float:
        return loss_fn(model.forward(x), target)[0]

    checks = []
    for name, p in params.items():
        flat = p.value.reshape(-1)
        numeric = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_at()
            flat[j] = orig - eps
            down = loss_at()
            flat[j] = orig
            numeric[j] = (up - down) / (2 * eps)
        err = relative_error(analytic[name].reshape(-1), numeric)
        flagged = [int(j) for j in np.flatnonzero(err > tolerance)]
        checks.append(ParamCheck(name, flat.size, float(err.max(initial=0.0)), flagged))
    return GradCheckReport(tolerance, checks)
