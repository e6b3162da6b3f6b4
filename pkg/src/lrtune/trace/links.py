"""Link functions mapping latent values and elapsed time to a trace increment."""
from __future__ import annotations

import enum

import numpy as np

from ..gp import autodiff as ad


def softplus(u):
    """log(1 + e^u), accurate for |u| up to several hundred."""
    out = np.logaddexp(0.0, u)
    return float(out) if np.ndim(out) == 0 else out


class LinkFunction(enum.Enum):
    LINEAR = "linear"
    EXPONENTIAL = "exponential"
    IDENTITY = "identity"  # diagnostic only: not monotone

    @property
    def p(self) -> int:
        return 2 if self is LinkFunction.EXPONENTIAL else 1

    @property
    def monotone(self) -> bool:
        return self is not LinkFunction.IDENTITY

    def __call__(self, f, t):
        """Increment for latent values ``f`` (sequence of p arrays) after elapsed time ``t``."""
        if self is LinkFunction.LINEAR:
            return ad.softplus(f[0]) * t
        if self is LinkFunction.EXPONENTIAL:
            return ad.softplus(f[0]) * (1.0 - ad.exp(-ad.softplus(f[1]) * t))
        return f[0] * t

    def saturation(self, f):
        """Limit of the increment as t -> infinity (inf for the linear link)."""
        if self is LinkFunction.EXPONENTIAL:
            return ad.softplus(f[0])
        return np.inf


def link_eval(link: LinkFunction, f, t: float) -> float:
    """Scalar increment eta(f, t) for a single latent vector ``f`` of length p."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    if len(f) != link.p:
        raise ValueError(f"{link.value} link expects {link.p} latent values, got {len(f)}")
    if t < 0:
        raise ValueError("elapsed time must be non-negative")
    return float(link([f[i] for i in range(link.p)], float(t)))
