"""Desk-scale trainable tasks, a checkpointable SGD/Adam runner and baselines.

All objectives are maximised: a task reports y = -loss.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .trace.schedule import Schedule, Trace, normalize_lr

FAMILIES = ("noisy_quadratic", "rosenbrock2d", "synthetic_logistic")


@dataclass
class TaskSpec:
    task_id: str
    family: str = "noisy_quadratic"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if self.family == "noisy_quadratic":
            eig = np.asarray(self.params.get("eigenvalues", [1.0]), dtype=float)
            if np.any(eig <= 0):
                raise ValueError("quadratic eigenvalues must be positive")
        self._data = None

    # -- family helpers ---------------------------------------------------
    @property
    def dim(self) -> int:
        if self.family == "noisy_quadratic":
            return len(self.params.get("eigenvalues", [1.0]))
        if self.family == "rosenbrock2d":
            return 2
        return int(self.params.get("input_dim", 5)) + 1

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.asarray(self.params.get("eigenvalues", [1.0]), dtype=float)

    @property
    def sigma_g(self) -> float:
        return float(self.params.get("sigma_g", 0.0))

    def initial_parameters(self) -> np.ndarray:
        """theta_0: explicit ``theta0`` if given, else a draw fixed by the task seed."""
        if "theta0" in self.params:
            return np.array(self.params["theta0"], dtype=float).reshape(self.dim)
        rng = np.random.default_rng([self.seed, 7919])
        if self.family == "noisy_quadratic":
            return float(self.params.get("theta0_scale", 1.0)) * np.sign(rng.standard_normal(self.dim))
        if self.family == "rosenbrock2d":
            return np.array([-1.2, 1.0]) + 0.05 * rng.standard_normal(2)
        return np.zeros(self.dim)

    def _logistic_data(self):
        if self._data is None:
            p = self.params
            n, k = int(p.get("n_samples", 512)), int(p.get("input_dim", 5))
            rng = np.random.default_rng([self.seed, 104729])
            labels = rng.integers(0, 2, n)
            direction = rng.standard_normal(k)
            direction /= np.linalg.norm(direction)
            X = rng.standard_normal((n, k)) + np.outer(2 * labels - 1, direction) * float(p.get("separation", 1.0)) / 2
            self._data = (np.hstack([X, np.ones((n, 1))]), labels.astype(float))
        return self._data

    def objective(self, theta: np.ndarray) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            if self.family == "noisy_quadratic":
                return float(-0.5 * np.sum(self.eigenvalues * theta * theta))
            if self.family == "rosenbrock2d":
                a, b = theta
                return float(-((1 - a) ** 2 + 100.0 * (b - a * a) ** 2))
            X, lab = self._logistic_data()
            z = X @ theta
            return float(-np.mean(np.logaddexp(0.0, z) - lab * z))

    def gradient(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Stochastic gradient of the loss (-objective)."""
        with np.errstate(over="ignore", invalid="ignore"):
            if self.family == "noisy_quadratic":
                return self.eigenvalues * theta + self.sigma_g * rng.standard_normal(self.dim)
            if self.family == "rosenbrock2d":
                a, b = theta
                g = np.array([-2 * (1 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
                return g + self.sigma_g * rng.standard_normal(2)
            X, lab = self._logistic_data()
            bs = int(self.params.get("batch_size", 32))
            idx = rng.integers(0, len(lab), bs)
            z = X[idx] @ theta
            p = 0.5 * (1.0 + np.tanh(0.5 * z))
            return X[idx].T @ (p - lab[idx]) / bs

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "family": self.family, "params": _jsonable(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["task_id"], d["family"], dict(d.get("params", {})), int(d.get("seed", 0)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class RunnerConfig:
    optimizer: str = "sgd"
    record_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    def check_schedule(self, schedule: Schedule) -> None:
        for a, b in zip(schedule.breakpoints, schedule.breakpoints[1:]):
            if b - a < 1:
                raise ValueError(f"empty interval [{a}, {b})")


@dataclass
class RunnerCheckpoint:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    t: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, task: TaskSpec, seed: int = 0) -> "RunnerCheckpoint":
        theta = task.initial_parameters()
        rng = np.random.default_rng(seed)
        return cls(theta, np.zeros_like(theta), np.zeros_like(theta), 0, 0, rng.bit_generator.state)

    def to_bytes(self) -> bytes:
        d = {"theta": [repr(float(x)) for x in self.theta], "m": [repr(float(x)) for x in self.m],
             "v": [repr(float(x)) for x in self.v], "step": self.step, "t": self.t, "rng_state": self.rng_state}
        return json.dumps(d, sort_keys=True).encode()

    def generator(self) -> np.random.Generator:
        rng = np.random.default_rng()
        rng.bit_generator.state = copy.deepcopy(self.rng_state)
        return rng


def duplicate(checkpoint: RunnerCheckpoint) -> RunnerCheckpoint:
    return copy.deepcopy(checkpoint)


@dataclass
class Segment:
    times: np.ndarray
    values: np.ndarray
    failed: bool


def run_interval(checkpoint: RunnerCheckpoint, task: TaskSpec, lr: float, n_steps: int,
                 config: RunnerConfig | None = None, rng: np.random.Generator | None = None
                 ) -> tuple[RunnerCheckpoint, Segment]:
    """Apply ``n_steps`` updates at constant ``lr``.

    The segment records the objective at the start and every ``record_every``
    steps of the global clock, always including the end. Gradient noise comes
    from ``rng`` when given, otherwise from the checkpoint's own stream (which
    is advanced in the returned checkpoint).
    """
    cfg = config or RunnerConfig()
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    own = rng is None
    rng = checkpoint.generator() if own else rng
    theta, m, v = checkpoint.theta.copy(), checkpoint.m.copy(), checkpoint.v.copy()
    step, t0 = checkpoint.step, checkpoint.t
    times, values = [t0], [task.objective(theta)]
    failed = not np.isfinite(values[0])
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, n_steps + 1):
            if failed:
                break
            g = task.gradient(theta, rng)
            step += 1
            if cfg.optimizer == "sgd":
                theta = theta - lr * g
            else:
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                mh = m / (1 - cfg.beta1 ** step)
                vh = v / (1 - cfg.beta2 ** step)
                theta = theta - lr * mh / (np.sqrt(vh) + cfg.eps)
            t = t0 + i
            if (t % cfg.record_every == 0) or i == n_steps or not np.all(np.isfinite(theta)):
                y = task.objective(theta)
                times.append(t)
                values.append(y)
                if not np.isfinite(y) or not np.all(np.isfinite(theta)):
                    failed = True
    new = RunnerCheckpoint(theta, m, v, step, times[-1], rng.bit_generator.state if own else checkpoint.rng_state)
    return new, Segment(np.array(times), np.array(values), failed)


def run_schedule(task: TaskSpec, schedule: Schedule, config: RunnerConfig | None = None,
                 rng: np.random.Generator | None = None, run_id: str = "", task_index: int = 0,
                 checkpoint: RunnerCheckpoint | None = None) -> Trace:
    """Run a whole piecewise-constant schedule from theta_0 and return its trace."""
    cfg = config or RunnerConfig()
    cfg.check_schedule(schedule)
    rng = rng if rng is not None else np.random.default_rng(0)
    ck = checkpoint or RunnerCheckpoint.initial(task)
    times, values, failed = [], [], False
    bp = schedule.breakpoints
    for k in range(schedule.d):
        ck, seg = run_interval(ck, task, schedule.rate(k), bp[k + 1] - bp[k], cfg, rng)
        start = 1 if times else 0
        times.extend(seg.times[start:])
        values.extend(seg.values[start:])
        if seg.failed:
            failed = True
            break
    return Trace(task.task_id, schedule, np.array(times), np.array(values), failed=failed,
                 run_id=run_id, task_index=task_index)


# ---------------------------------------------------------------------------
# task families and oracles
# ---------------------------------------------------------------------------

def make_task_family(family_seed: int, M: int, spread: float, dim: int = 10, log_eig_range=(-2.0, 0.0),
                     sigma_g: float = 0.1, theta0_scale: float = 1.0) -> list[TaskSpec]:
    """M related noisy quadratics.

    A shared log-spaced centre spectrum is scaled per task by 10^(spread * u)
    with u ~ U(-1, 1), plus a per-eigenvalue factor 10^(spread/4 * u_i); the
    optimal rates therefore shift together across tasks.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng([family_seed, 31337])
    centre = np.logspace(log_eig_range[0], log_eig_range[1], dim)
    tasks = []
    for j in range(M):
        shift = spread * rng.uniform(-1, 1)
        jitter = 0.25 * spread * rng.uniform(-1, 1, dim)
        eig = np.sort(centre * 10.0 ** (shift + jitter))
        params = {"eigenvalues": eig.tolist(), "sigma_g": sigma_g, "theta0_scale": theta0_scale}
        tasks.append(TaskSpec(f"quad{j}", "noisy_quadratic", params, seed=int(family_seed) * 1000 + j))
    return tasks


def ill_conditioned_quadratic(task_id: str = "illcond", dim: int = 10, condition: float = 100.0,
                              lam_max: float = 1.0, sigma_g: float = 0.1, seed: int = 0) -> TaskSpec:
    eig = np.logspace(np.log10(lam_max / condition), np.log10(lam_max), dim)
    return TaskSpec(task_id, "noisy_quadratic", {"eigenvalues": eig.tolist(), "sigma_g": sigma_g}, seed=seed)


def optimal_constant_rate(task: TaskSpec) -> float:
    """Rate minimising the worst contraction max_i |1 - lr * lambda_i| (noiseless gradient descent)."""
    eig = task.eigenvalues
    return 2.0 / (eig.min() + eig.max())


def expected_objective(task: TaskSpec, rates, steps) -> float:
    """E[-loss] after SGD on a noisy quadratic with ``steps[k]`` steps at ``rates[k]``.

    Per coordinate, E[theta^2] obeys v <- (1 - lr*lambda)^2 v + lr^2 sigma^2,
    summed in closed form over each constant-rate block.
    """
    if task.family != "noisy_quadratic":
        raise ValueError("closed-form expectation only exists for noisy quadratics")
    lam = task.eigenvalues
    v = task.initial_parameters() ** 2
    s2 = task.sigma_g ** 2
    with np.errstate(over="ignore", invalid="ignore"):
        for lr, n in zip(rates, steps):
            c = (1.0 - lr * lam) ** 2
            cn = c ** n
            geo = np.where(np.isclose(c, 1.0), float(n), (1.0 - cn) / np.where(np.isclose(c, 1.0), 1.0, 1.0 - c))
            v = cn * v + lr * lr * s2 * geo
    return float(-0.5 * np.sum(lam * v))


def expected_schedule_objective(task: TaskSpec, schedule: Schedule) -> float:
    bp = schedule.breakpoints
    return expected_objective(task, schedule.rates(), np.diff(bp))


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class BaselineResult:
    best_rate: float | None
    trace: Trace | None
    finals: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    all_failed: bool = False


def constant_grid(lr_min: float, lr_max: float, n: int = 5) -> np.ndarray:
    return np.logspace(np.log10(lr_min), np.log10(lr_max), n)


def _single_interval_schedule(lr: float, T_d: int) -> Schedule:
    lo, hi = min(lr, 1e-12) / 10, max(lr, 1e-12) * 10
    return Schedule((0, T_d), (float(normalize_lr(lr, lo, hi)),), lo, hi)


def best_constant_baseline(task: TaskSpec, grid, T_d: int, config: RunnerConfig | None = None,
                           rng: np.random.Generator | None = None, seed: int = 0) -> BaselineResult:
    """Run every constant rate in ``grid`` for T_d steps and keep the best final objective.

    Each rate gets its own noise stream derived from ``seed`` (or ``rng``).
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty rate grid")
    cfg = config or RunnerConfig()
    finals, traces = {}, {}
    for i, lr in enumerate(grid):
        r = np.random.default_rng([seed, i]) if rng is None else rng
        tr = run_schedule(task, _single_interval_schedule(float(lr), T_d), cfg, r, run_id=f"const{i}")
        traces[float(lr)] = tr
        finals[float(lr)] = -np.inf if tr.failed else tr.final_value
    ok = {lr: y for lr, y in finals.items() if np.isfinite(y)}
    if not ok:
        return BaselineResult(None, None, finals, traces, all_failed=True)
    best = max(ok, key=lambda lr: (ok[lr], -grid.index(lr)))
    return BaselineResult(best, traces[best], finals, traces)


def decay_rates(gamma0: float, gamma: float, n_blocks: int = 20) -> np.ndarray:
    """lr for blocks e = 1..n_blocks: gamma0 * gamma^(e/10)."""
    return gamma0 * gamma ** (np.arange(1, n_blocks + 1) / 10.0)


def exponential_decay_baseline(task: TaskSpec, gamma0: float, gamma: float, T_d: int,
                               config: RunnerConfig | None = None, rng: np.random.Generator | None = None,
                               n_blocks: int = 20) -> Trace:
    """Per-block decayed rate; blocks have length T_d / n_blocks (rounded to whole steps)."""
    if not gamma0 > 0 or not 0 < gamma <= 1:
        raise ValueError("need gamma0 > 0 and 0 < gamma <= 1")
    cfg = config or RunnerConfig()
    rates = decay_rates(gamma0, gamma, n_blocks)
    lo, hi = float(rates.min()) / 10, float(rates.max()) * 10
    if T_d < n_blocks:
        raise ValueError(f"T_d={T_d} is shorter than {n_blocks} blocks")
    bp = np.round(np.linspace(0, T_d, n_blocks + 1)).astype(int)
    sched = Schedule(tuple(bp), tuple(float(normalize_lr(r, lo, hi)) for r in rates), lo, hi)
    return run_schedule(task, sched, cfg, rng if rng is not None else np.random.default_rng(0), run_id="decay")


def decay_grid(lr_min: float, lr_max: float, gammas=(0.5, 0.63, 0.77, 0.9), n_initial: int = 3
               ) -> list[tuple[float, float]]:
    """(gamma0, gamma) pairs, gamma0 log-spaced over the upper two thirds of [lr_min, lr_max]."""
    lo = np.log10(lr_min) + (np.log10(lr_max) - np.log10(lr_min)) / 3
    g0 = np.logspace(lo, np.log10(lr_max), n_initial)
    return [(float(a), float(g)) for a in g0 for g in gammas]


def spec_records(tasks: list[TaskSpec]) -> list[dict]:
    return [t.to_dict() for t in tasks]


__all__ = [
    "BaselineResult", "RunnerCheckpoint", "RunnerConfig", "Segment", "TaskSpec", "best_constant_baseline",
    "constant_grid", "decay_grid", "decay_rates", "duplicate", "expected_objective", "expected_schedule_objective",
    "exponential_decay_baseline", "ill_conditioned_quadratic", "make_task_family", "optimal_constant_rate",
    "run_interval", "run_schedule",
]
