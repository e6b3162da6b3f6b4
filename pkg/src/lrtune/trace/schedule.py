"""Piecewise-constant learning-rate schedules and recorded optimiser traces."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class MalformedTrace(ValueError):
    """A trace is missing the observation at one of its breakpoints."""

    def __init__(self, trace_id: str, breakpoint: int):
        self.trace_id = trace_id
        self.breakpoint = breakpoint
        super().__init__(f"trace {trace_id!r} has no observation at breakpoint t={breakpoint}")


def normalize_lr(lr, lr_min: float, lr_max: float):
    """Map a learning rate to [0, 1] in log10 space."""
    lo, hi = np.log10(lr_min), np.log10(lr_max)
    return (np.log10(lr) - lo) / (hi - lo)


def denormalize_lr(x, lr_min: float, lr_max: float):
    lo, hi = np.log10(lr_min), np.log10(lr_max)
    return 10.0 ** (lo + np.asarray(x, dtype=float) * (hi - lo))


@dataclass(frozen=True)
class Schedule:
    """Breakpoints T_0 = 0 < ... < T_d and one normalised value per interval."""

    breakpoints: tuple[int, ...]
    values: tuple[float, ...]
    lr_min: float = 1e-5
    lr_max: float = 1e-2

    def __post_init__(self):
        bp = tuple(int(b) for b in self.breakpoints)
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if len(bp) < 2 or bp[0] != 0:
            raise ValueError("breakpoints must start at 0 and define at least one interval")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if len(vals) != len(bp) - 1:
            raise ValueError(f"expected {len(bp) - 1} values, got {len(vals)}")
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValueError("schedule values must lie in [0, 1]")
        if not (0 < self.lr_min < self.lr_max):
            raise ValueError("need 0 < lr_min < lr_max")

    @classmethod
    def uniform(cls, total_steps: int, values, lr_min: float = 1e-5, lr_max: float = 1e-2) -> "Schedule":
        """Equal-length intervals over ``total_steps`` (rounded to integers)."""
        values = list(values)
        bp = np.round(np.linspace(0, total_steps, len(values) + 1)).astype(int)
        return cls(tuple(bp), tuple(values), lr_min, lr_max)

    @property
    def d(self) -> int:
        return len(self.values)

    @property
    def total_steps(self) -> int:
        return self.breakpoints[-1]

    @property
    def decades(self) -> float:
        """Width of the normalised range in decades of learning rate."""
        return float(np.log10(self.lr_max) - np.log10(self.lr_min))

    def rates(self) -> np.ndarray:
        return denormalize_lr(np.array(self.values), self.lr_min, self.lr_max)

    def rate(self, k: int) -> float:
        return float(denormalize_lr(self.values[k], self.lr_min, self.lr_max))

    def interval_of(self, t: float) -> int:
        """Index k with T_k <= t < T_{k+1}; the final breakpoint maps to the last interval."""
        if t < 0 or t > self.breakpoints[-1]:
            raise ValueError(f"t={t} outside [0, {self.breakpoints[-1]}]")
        k = int(np.searchsorted(self.breakpoints, t, side="right") - 1)
        return min(k, self.d - 1)

    def with_values(self, values) -> "Schedule":
        return replace(self, values=tuple(float(v) for v in values))

    def prefix(self, k: int) -> "Schedule":
        """Schedule truncated to its first ``k`` intervals."""
        return replace(self, breakpoints=self.breakpoints[: k + 1], values=self.values[:k])

    def to_dict(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "values": list(self.values),
                "lr_min": self.lr_min, "lr_max": self.lr_max}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(tuple(d["breakpoints"]), tuple(d["values"]), float(d["lr_min"]), float(d["lr_max"]))


@dataclass
class Trace:
    """Observations (t, y) of one run. ``schedule`` covers at least the observed span.

    A trace may start after T_0 (a branch duplicated from another run's
    checkpoint); only breakpoints inside the observed span must be observed.
    """

    task_id: str
    schedule: Schedule
    times: np.ndarray
    values: np.ndarray
    failed: bool = False
    run_id: str = ""
    task_index: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have the same length")
        if len(self.times) and (np.any(np.diff(self.times) < 0)):
            raise ValueError("observation times must be sorted")
        if len(self.times) and (self.times[0] < 0 or self.times[-1] > self.schedule.total_steps):
            raise ValueError("observation times outside the schedule span")

    @property
    def start(self) -> int:
        return int(self.times[0]) if len(self.times) else 0

    @property
    def end(self) -> int:
        return int(self.times[-1]) if len(self.times) else 0

    def observed_breakpoints(self) -> list[int]:
        """Indices k of breakpoints inside [first, last] observation time."""
        if not len(self.times):
            return []
        return [k for k, T in enumerate(self.schedule.breakpoints) if self.start <= T <= self.end]

    def boundary_values(self) -> dict[int, float]:
        """Y_k for every observed breakpoint; raises MalformedTrace if one is missing."""
        out = {}
        for k in self.observed_breakpoints():
            T = self.schedule.breakpoints[k]
            hit = np.nonzero(self.times == T)[0]
            if not len(hit):
                raise MalformedTrace(self.run_id or self.task_id, T)
            out[k] = float(self.values[hit[0]])
        return out

    @property
    def final_value(self) -> float:
        return float(self.values[-1]) if len(self.values) else float("nan")
