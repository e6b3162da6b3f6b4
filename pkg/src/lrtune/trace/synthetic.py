"""Traces generated by a known NARX law, used as ground truth when checking fits."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .links import LinkFunction, softplus
from .schedule import Schedule, Trace


def default_latent(y, x):
    # fast progress at high rates early on, slowing down as the trace rises
    return 0.5 + 1.5 * x - 1.0 * y


@dataclass
class SyntheticLaw:
    latent: Callable = default_latent
    link: LinkFunction = LinkFunction.LINEAR
    m0: float = 0.0
    s0: float = 0.02
    noise: float = 0.005
    time_scale: float = 100.0

    def increment_rate(self, y, x):
        """softplus(f_1(y, x)), the quantity recovered by a fitted linear-link model."""
        return softplus(self.latent(np.asarray(y, float), np.asarray(x, float)))

    def boundary_path(self, schedule: Schedule, y0: float) -> np.ndarray:
        Y = [y0]
        bp = schedule.breakpoints
        for k in range(schedule.d):
            f = self.latent(Y[-1], schedule.values[k])
            Y.append(Y[-1] + float(self.link([f], (bp[k + 1] - bp[k]) / self.time_scale)))
        return np.array(Y)

    def trace(self, schedule: Schedule, rng: np.random.Generator, record_every: int = 25,
              run_id: str = "", task_id: str = "synthetic") -> Trace:
        y0 = self.m0 + self.s0 * rng.standard_normal()
        Y = self.boundary_path(schedule, y0)
        bp = schedule.breakpoints
        times, vals = [], []
        for k in range(schedule.d):
            f = self.latent(Y[k], schedule.values[k])
            for t in range(bp[k], bp[k + 1], record_every):
                inc = float(self.link([f], (t - bp[k]) / self.time_scale))
                # boundary values are the noiseless Y_k; in-between points carry noise
                noise = 0.0 if t == bp[k] else self.noise * rng.standard_normal()
                times.append(t)
                vals.append(Y[k] + inc + noise)
        times.append(bp[-1])
        vals.append(Y[-1])
        return Trace(task_id, schedule, np.array(times), np.array(vals), run_id=run_id)


def random_schedule(rng: np.random.Generator, d: int = 4, total_steps: int = 400) -> Schedule:
    return Schedule.uniform(total_steps, rng.uniform(0.0, 1.0, d))
