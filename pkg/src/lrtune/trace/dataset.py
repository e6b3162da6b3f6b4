"""Turning recorded traces into latent-GP regression rows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import Trace

TRANSFORMS = ("identity", "neglog")


@dataclass
class YNormalizer:
    """Monotone transform followed by an affine map onto [0, 1] over the training range.

    ``neglog`` maps a negative loss y to -log(-y); it is increasing, so
    quantiles and argmax decisions are unaffected by modelling on that scale.
    """

    lo: float = 0.0
    span: float = 1.0
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if not self.span > 0:
            raise ValueError("normaliser span must be positive")

    def g(self, y):
        y = np.asarray(y, dtype=float)
        if self.transform == "neglog":
            with np.errstate(divide="ignore", invalid="ignore"):
                return -np.log(np.maximum(-y, 1e-300))
        return y

    def g_inv(self, z):
        z = np.asarray(z, dtype=float)
        if self.transform == "neglog":
            return -np.exp(-z)
        return z

    def forward(self, y):
        return (self.g(y) - self.lo) / self.span

    def inverse(self, z):
        return self.g_inv(self.lo + np.asarray(z, dtype=float) * self.span)

    @classmethod
    def fit(cls, values, transform: str = "identity") -> "YNormalizer":
        g = cls(transform=transform).g(values)
        g = g[np.isfinite(g)]
        if not len(g):
            return cls(0.0, 1.0, transform)
        lo, hi = float(g.min()), float(g.max())
        return cls(lo, hi - lo if hi > lo else 1.0, transform)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "span": self.span, "transform": self.transform}


@dataclass
class TrainingSet:
    inputs: np.ndarray       # (n, 2q): normalised Y_k..Y_{k-q+1}, then x_k..x_{k-q+1}
    base: np.ndarray         # normalised Y_k
    elapsed: np.ndarray      # t - T_k, in iterations
    target: np.ndarray       # normalised observation
    trace_index: np.ndarray
    interval: np.ndarray
    task_index: np.ndarray
    times: np.ndarray

    def __len__(self) -> int:
        return len(self.target)

    @classmethod
    def empty(cls, q: int) -> "TrainingSet":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=int)
        return cls(np.zeros((0, 2 * q)), z, z, z, zi, zi, zi, zi)


def usable(traces):
    return [tr for tr in traces if not tr.failed and len(tr.times)]


def build_training_set(traces: list[Trace], q: int = 1, normalizer: YNormalizer | None = None) -> TrainingSet:
    """One row per observation, grouped by the interval that contains it.

    An observation at t in [T_k, T_{k+1}) belongs to interval k; the
    observation at a trace's final breakpoint closes the last interval.
    Rows whose interval lacks q boundary values of history are dropped, and
    failed traces are skipped entirely.
    """
    if q < 1:
        raise ValueError("order q must be >= 1")
    norm = normalizer or YNormalizer()
    rows = {k: [] for k in ("inputs", "base", "elapsed", "target", "trace", "interval", "task", "times")}
    for ti, tr in enumerate(traces):
        if tr.failed or not len(tr.times):
            continue
        bv = tr.boundary_values()
        sched = tr.schedule
        for t, y in zip(tr.times, tr.values):
            k = int(np.searchsorted(sched.breakpoints, t, side="right") - 1)
            if t == sched.breakpoints[k] and t == tr.end and (k - 1) in bv:
                # final observation at a breakpoint closes the preceding interval
                k -= 1
            if k >= sched.d:
                continue
            hist = [k - l for l in range(q)]
            if any(h not in bv for h in hist):
                continue
            Yh = norm.forward(np.array([bv[h] for h in hist]))
            xh = np.array([sched.values[h] for h in hist])
            rows["inputs"].append(np.concatenate([Yh, xh]))
            rows["base"].append(float(norm.forward(bv[k])))
            rows["elapsed"].append(float(t - sched.breakpoints[k]))
            rows["target"].append(float(norm.forward(y)))
            rows["trace"].append(ti)
            rows["interval"].append(k)
            rows["task"].append(tr.task_index)
            rows["times"].append(int(t))
    if not rows["target"]:
        return TrainingSet.empty(q)
    return TrainingSet(
        np.array(rows["inputs"]), np.array(rows["base"]), np.array(rows["elapsed"]), np.array(rows["target"]),
        np.array(rows["trace"], dtype=int), np.array(rows["interval"], dtype=int),
        np.array(rows["task"], dtype=int), np.array(rows["times"], dtype=int),
    )
