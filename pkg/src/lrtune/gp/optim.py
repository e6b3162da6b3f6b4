"""Adam-based parameter fitting for tape-differentiated objectives."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .kernels import inv_softplus, softplus


@dataclass
class GradientRecord:
    value: float
    partials: dict[str, np.ndarray]


@dataclass
class AdamConfig:
    steps: int = 500
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class FitResult:
    params: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)


class FitAborted(RuntimeError):
    """Objective or gradient became non-finite during fitting."""

    def __init__(self, step: int, value: float, bad: list[str]):
        self.step = step
        self.value = value
        self.bad = bad
        super().__init__(f"non-finite objective/gradient at step {step} (value={value}, parameters={bad})")


def differentiable(fn: Callable[[dict], object]) -> Callable[[dict], GradientRecord]:
    """Turn a tape-valued function of a parameter dict into a GradientRecord producer."""

    def objective(params: dict) -> GradientRecord:
        value, grads = ad.value_and_grad(fn, params)
        return GradientRecord(value, grads)

    return objective


def fit_parameters(objective: Callable[[dict], GradientRecord], params: dict, config: AdamConfig | None = None,
                   positive: Iterable[str] = (), callback: Callable[[int, dict], None] | None = None) -> FitResult:
    """Minimise ``objective`` with Adam.

    Parameters named in ``positive`` are given and returned on the constrained
    (positive) scale but optimised through their softplus pre-image.
    """
    cfg = config or AdamConfig()
    positive = set(positive)
    theta = {k: (inv_softplus(v) if k in positive else np.array(v, dtype=float)) for k, v in params.items()}

    def constrained(th):
        return {k: (softplus(v) if k in positive else v) for k, v in th.items()}

    m = {k: np.zeros_like(v) for k, v in theta.items()}
    v2 = {k: np.zeros_like(v) for k, v in theta.items()}
    history: list[float] = []
    for step in range(cfg.steps):
        rec = objective(constrained(theta))
        bad = [k for k, g in rec.partials.items() if not np.all(np.isfinite(g))]
        if not np.isfinite(rec.value) or bad:
            raise FitAborted(step, rec.value, bad)
        history.append(float(rec.value))
        t = step + 1
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for k in theta:
            g = np.asarray(rec.partials.get(k, 0.0), dtype=float)
            if k in positive:
                g = g / (1.0 + np.exp(-theta[k]))  # chain rule through softplus
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g
            v2[k] = cfg.beta2 * v2[k] + (1.0 - cfg.beta2) * g * g
            theta[k] = theta[k] - cfg.learning_rate * (m[k] / bc1) / (np.sqrt(v2[k] / bc2) + cfg.eps)
        if callback is not None:
            callback(step, theta)
    return FitResult(constrained(theta), history)
