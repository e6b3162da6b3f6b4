"""Dynamic single-task learning-rate tuning with Q synchronous parallel runs.

Per interval: keep the best live run, duplicate its checkpoint Q times and
give copy i the rate maximising the alpha_i-quantile of the predicted trace
value at the end of the interval, subject to a one-decade change cap and a
failure-probability constraint.
"""
from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .gp.classifier import BernoulliSvgp, ClassifierConfig, classifier_fit
from .gp.optim import AdamConfig
from .seeding import derive_rng
from .tasks import RunnerCheckpoint, RunnerConfig, TaskSpec, duplicate, run_interval
from .trace.links import LinkFunction
from .trace.model import TraceModel, TrainConfig, fit
from .trace.sampling import Rollout
from .trace.schedule import Schedule, Trace, denormalize_lr

log = logging.getLogger(__name__)


class TuningAborted(RuntimeError):
    pass


@dataclass
class SingleTuneConfig:
    Q: int = 5
    d: int = 10
    total_steps: int = 2000
    lr_min: float = 1e-3
    lr_max: float = 1.0
    alphas: tuple | None = None
    n_mc: int = 256
    grid_points: int = 129
    refine: bool = True
    max_decade_change: float = 1.0
    use_classifier: bool = True
    failure_c: float = 1.0
    failure_p_min: float = 0.05
    failure_p_max: float = 0.95
    drop_fraction: float = 0.5
    keep_all: bool = False
    link: str = "linear"
    transform: str = "neglog"
    num_inducing: int = 100
    fit_steps: int = 600
    refit_steps: int = 200
    learning_rate: float = 0.02
    n_mc_elbo: int = 8
    runner: RunnerConfig = field(default_factory=RunnerConfig)
    seed: int = 0

    def __post_init__(self):
        if self.Q < 1 or self.d < 1:
            raise ValueError("Q and d must be >= 1")
        if not 0 < self.lr_min < self.lr_max:
            raise ValueError("need 0 < lr_min < lr_max")
        a = self.fan
        if np.any(a <= 0) or np.any(a >= 1) or np.any(np.diff(a) <= 0):
            raise ValueError("alphas must be strictly increasing within (0, 1)")
        if len(a) != self.Q:
            raise ValueError("need one alpha per parallel run")

    @property
    def fan(self) -> np.ndarray:
        return quantile_fan(self.Q) if self.alphas is None else np.asarray(self.alphas, dtype=float)

    @property
    def decades(self) -> float:
        return float(np.log10(self.lr_max) - np.log10(self.lr_min))

    @property
    def cap(self) -> float:
        """Largest allowed change of the normalised rate between intervals."""
        return self.max_decade_change / self.decades

    def schedule(self, values=None) -> Schedule:
        values = [0.5] * self.d if values is None else values
        return Schedule.uniform(self.total_steps, values, self.lr_min, self.lr_max)

    def train_config(self, steps: int) -> TrainConfig:
        return TrainConfig(adam=AdamConfig(steps=steps, learning_rate=self.learning_rate), n_mc=self.n_mc_elbo,
                           num_inducing=self.num_inducing, transform=self.transform, seed=self.seed)


def initial_rates(config: SingleTuneConfig) -> np.ndarray:
    """Uniform grid over the normalised (log) range; a single run sits at the midpoint."""
    if config.Q == 1:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, config.Q)


def quantile_fan(Q: int) -> np.ndarray:
    if Q < 1:
        raise ValueError("Q must be >= 1")
    return (2 * np.arange(1, Q + 1) - 1) / (2.0 * Q)


def failure_threshold(alpha: float, c: float = 1.0, p_min: float = 0.05, p_max: float = 0.95) -> float:
    return float(np.clip(c * alpha, p_min, p_max))


# ---------------------------------------------------------------------------
# acquisition
# ---------------------------------------------------------------------------

@dataclass
class RateDecision:
    x: float
    value: float
    fallback: bool = False


def feasible_window(prev_rate: float | None, cap: float) -> tuple[float, float]:
    if prev_rate is None:
        return 0.0, 1.0
    return max(0.0, prev_rate - cap), min(1.0, prev_rate + cap)


def select_from_samples(samples: np.ndarray, grid: np.ndarray, alpha: float, prev_rate: float | None,
                        feasible: np.ndarray | None = None) -> int | None:
    """Index of the grid point with the largest empirical alpha-quantile among feasible ones.

    Near-ties (relative 1e-12) go to the point closest to ``prev_rate`` (or
    the grid midpoint when there is none).
    """
    q = np.quantile(samples, alpha, axis=0)
    ok = np.ones(len(grid), bool) if feasible is None else np.asarray(feasible, bool)
    ok &= np.isfinite(q)
    if not np.any(ok):
        return None
    best = np.max(q[ok])
    tol = 1e-12 * max(1.0, abs(best))
    cand = np.nonzero(ok & (q >= best - tol))[0]
    anchor = 0.5 * (grid[0] + grid[-1]) if prev_rate is None else prev_rate
    return int(cand[np.argmin(np.abs(grid[cand] - anchor))])


class Acquisition:
    """Samples of Y_{k+1} under common random numbers for any candidate rate."""

    def __init__(self, model: TraceModel, y_current: float, dt: float, n_samples: int, rng: np.random.Generator,
                 Y_hist=None, x_hist=None, task_index: int = 0):
        self.model = model
        norm = model.normalizer
        hist = None if Y_hist is None else [np.full(n_samples, float(norm.forward(y))) for y in Y_hist]
        xh = None if x_hist is None else [np.full(n_samples, float(x)) for x in x_hist]
        self.rollout = Rollout(model, float(norm.forward(y_current)), n_samples, task_index=task_index,
                               Y_hist=hist, x_hist=xh)
        self.dt = dt
        self.eps = rng.standard_normal((n_samples, model.link.p))

    def samples(self, xs) -> np.ndarray:
        """Normalised (transformed-scale) Y_{k+1} samples, shape (S, len(xs))."""
        return self.rollout.candidates(np.atleast_1d(xs), self.dt, self.eps)


def next_rate(model: TraceModel, classifier: BernoulliSvgp | None, Y_current: float, alpha: float,
              prev_rate: float | None, config: SingleTuneConfig, rng: np.random.Generator | None = None,
              acquisition: Acquisition | None = None, dt: float | None = None) -> RateDecision:
    """Maximise the alpha-quantile of Y_current + eta(f(Y_current, x), dt) over feasible x.

    Feasible: within ``config.cap`` of ``prev_rate`` and with predicted failure
    probability below ``failure_threshold(alpha)``. Dense grid, then bounded
    scalar refinement between the neighbours of the grid winner.
    """
    if not np.isfinite(Y_current):
        raise ValueError("current trace value must be finite")
    if acquisition is None:
        dt = config.total_steps / config.d if dt is None else dt
        acquisition = Acquisition(model, Y_current, dt, config.n_mc, rng if rng is not None else np.random.default_rng(0))
    lo, hi = feasible_window(prev_rate, config.cap)
    grid = np.linspace(lo, hi, config.grid_points) if hi > lo else np.array([lo])
    S = acquisition.samples(grid)
    feasible = np.ones(len(grid), bool)
    thr = failure_threshold(alpha, config.failure_c, config.failure_p_min, config.failure_p_max)
    gY = float(model.normalizer.g(Y_current))

    def allowed(x):
        if classifier is None:
            return np.ones(np.size(x), bool)
        xs = np.atleast_1d(x)
        return classifier.prob(np.column_stack([np.full(len(xs), gY), xs])) < thr

    feasible &= allowed(grid)
    i = select_from_samples(S, grid, alpha, prev_rate, feasible)
    if i is None:
        warnings.warn("no feasible learning rate; keeping the previous one", RuntimeWarning)
        x = 0.5 if prev_rate is None else prev_rate
        return RateDecision(float(x), float("nan"), fallback=True)
    x_best = float(grid[i])
    q_best = float(np.quantile(S[:, i], alpha))
    if config.refine and len(grid) > 2:
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        if b > a:
            res = minimize_scalar(lambda x: -float(np.quantile(acquisition.samples([x])[:, 0], alpha)),
                                  bounds=(a, b), method="bounded", options={"xatol": 1e-4})
            if res.success and -res.fun > q_best + 1e-12 * max(1.0, abs(q_best)) and allowed(res.x)[0]:
                x_best, q_best = float(res.x), float(-res.fun)
    return RateDecision(x_best, q_best)


# ---------------------------------------------------------------------------
# Alg. 1 driver
# ---------------------------------------------------------------------------

@dataclass
class RunState:
    checkpoint: RunnerCheckpoint
    values: list          # normalised rates of the path so far
    boundary: list        # Y_0..Y_k along the path
    times: list
    ys: list
    failed: bool = False


@dataclass
class TuneResult:
    best_schedule: Schedule
    best_trace: Trace
    final_value: float
    log: list
    model: TraceModel | None
    classifier: BernoulliSvgp | None
    traces: list
    runs: list


def checkpoint_digest(ck: RunnerCheckpoint) -> str:
    return hashlib.sha256(ck.to_bytes()).hexdigest()


def segment_failed(times, values, y_start: float, y_origin: float, drop_fraction: float, hard_fail: bool) -> bool:
    """Non-finite values, or a drop below Y_k of more than ``drop_fraction`` of the progress Y_k - Y_0."""
    v = np.asarray(values, dtype=float)
    if hard_fail or not np.all(np.isfinite(v)):
        return True
    drop = y_start - float(np.min(v))
    return drop > 0 and drop > drop_fraction * max(y_start - y_origin, 0.0)


def _segment_trace(task: TaskSpec, config: SingleTuneConfig, path_values, boundary, k: int, times, ys,
                   failed: bool, run_id: str, q: int) -> Trace:
    """Observations of interval k plus the q-1 preceding boundary values (history for NARX(q))."""
    values = list(path_values) + [0.5] * (config.d - len(path_values))
    sched = config.schedule(values)
    bp = sched.breakpoints
    hist_t = [bp[j] for j in range(max(0, k - q + 1), k)]
    hist_y = [boundary[j] for j in range(max(0, k - q + 1), k)]
    return Trace(task.task_id, sched, np.array(hist_t + list(times), dtype=int), np.array(hist_y + list(ys)),
                 failed=failed, run_id=run_id)


def _path_trace(task: TaskSpec, config: SingleTuneConfig, run: RunState, run_id: str) -> Trace:
    values = list(run.values) + [0.5] * (config.d - len(run.values))
    return Trace(task.task_id, config.schedule(values), np.array(run.times), np.array(run.ys),
                 failed=run.failed, run_id=run_id)


def run_tuning(task: TaskSpec, config: SingleTuneConfig | None = None, rng: np.random.Generator | None = None
               ) -> TuneResult:
    cfg = config or SingleTuneConfig()
    seed = cfg.seed if rng is None else int(rng.integers(2 ** 63))
    sched0 = cfg.schedule()
    cfg.runner.check_schedule(sched0)
    bp = sched0.breakpoints
    link = LinkFunction(cfg.link)
    alphas = cfg.fan
    records: list[dict] = []
    seg_traces: list[Trace] = []
    clf_X, clf_y = [], []
    model: TraceModel | None = None
    classifier = None

    ck0 = RunnerCheckpoint.initial(task)
    y0 = task.objective(ck0.theta)
    parents = [RunState(duplicate(ck0), [], [y0], [0], [y0]) for _ in range(cfg.Q)]
    rates = initial_rates(cfg)
    dup_from = [None] * cfg.Q
    consecutive = 0
    k = 0
    attempt = 0
    while k < cfg.d:
        children = []
        for i, (par, x) in enumerate(zip(parents, rates)):
            r = derive_rng(seed, "run", (attempt * cfg.d + k) * cfg.Q + i)
            ck_start = duplicate(par.checkpoint)
            digest = checkpoint_digest(ck_start)
            ck, seg = run_interval(ck_start, task, float(denormalize_lr(x, cfg.lr_min, cfg.lr_max)), bp[k + 1] - bp[k],
                                   cfg.runner, r)
            y_start = par.boundary[-1]
            failed = segment_failed(seg.times, seg.values, y_start, par.boundary[0], cfg.drop_fraction, seg.failed)
            child = RunState(ck, par.values + [float(x)], par.boundary + [float(seg.values[-1])],
                             par.times + list(seg.times[1:]), par.ys + list(seg.values[1:]), failed)
            children.append(child)
            records.append({"interval": k, "run": i, "rate": float(denormalize_lr(x, cfg.lr_min, cfg.lr_max)),
                            "x": float(x), "Y_start": float(y_start), "Y_end": float(seg.values[-1]),
                            "failed": bool(failed), "duplicated_from": dup_from[i], "superseded": False, "attempt": attempt,
                            "checkpoint_sha256": digest, "alpha": float(alphas[i])})
            seg_traces.append(_segment_trace(task, cfg, child.values, child.boundary, k, seg.times, seg.values,
                                             failed, f"k{k}r{i}a{attempt}", 1 if model is None else model.order))
            clf_X.append([y_start, float(x)])
            clf_y.append(int(failed))
        live = [i for i, c in enumerate(children) if not c.failed]
        if not live:
            for rec in records[-cfg.Q:]:
                rec["superseded"] = True
            consecutive += 1
            if consecutive >= 2:
                raise TuningAborted(f"all {cfg.Q} runs failed twice in a row at interval {k}")
            # restart interval k from the same parents with rates one decade lower
            shrink = 1.0 / cfg.decades
            prev = [p.values[-1] if p.values else None for p in parents]
            rates = np.array([np.clip(max(x - shrink, 0.0), *feasible_window(pv, cfg.cap)) for x, pv in zip(rates, prev)])
            attempt += 1
            continue
        consecutive = 0
        attempt = 0
        if k == cfg.d - 1:
            parents = children
            break

        istar = max(live, key=lambda i: (children[i].boundary[-1], -i))
        model = _refit(model, seg_traces, cfg, link, seed, k)
        classifier = _refit_classifier(clf_X, clf_y, cfg, model, seed) if cfg.use_classifier else None
        if cfg.keep_all:
            sources = [children[i] if not children[i].failed else children[istar] for i in range(cfg.Q)]
            dup_from = [i if not children[i].failed else istar for i in range(cfg.Q)]
        else:
            sources = [children[istar]] * cfg.Q
            dup_from = [istar] * cfg.Q
            records.append({"event": "duplicate", "interval": k + 1, "source": istar,
                            "Y": float(children[istar].boundary[-1])})
        acq_rng = derive_rng(seed, "acquisition", k)
        new_rates = []
        cache = {}
        for i in range(cfg.Q):
            src = sources[i]
            key = id(src)
            if key not in cache:
                q = model.order
                cache[key] = Acquisition(model, src.boundary[-1], bp[k + 2] - bp[k + 1], cfg.n_mc, acq_rng,
                                         Y_hist=src.boundary[-q:-1] if q > 1 else None,
                                         x_hist=src.values[-(q - 1):] if q > 1 else None)
            dec = next_rate(model, classifier, src.boundary[-1], float(alphas[i]), src.values[-1], cfg,
                            acquisition=cache[key])
            new_rates.append(dec.x)
        parents = [RunState(duplicate(s.checkpoint), list(s.values), list(s.boundary), list(s.times), list(s.ys))
                   for s in sources]
        rates = np.array(new_rates)
        k += 1

    final = parents
    live = [i for i, c in enumerate(final) if not c.failed]
    best = max(live, key=lambda i: (final[i].boundary[-1], -i))
    run = final[best]
    best_trace = _path_trace(task, cfg, run, f"best{best}")
    return TuneResult(cfg.schedule(run.values), best_trace, float(run.boundary[-1]), records, model, classifier,
                      seg_traces, final)


def _refit(model, traces, cfg: SingleTuneConfig, link: LinkFunction, seed: int, k: int) -> TraceModel:
    rng = derive_rng(seed, "fit", k)
    if model is None:
        model, _ = fit(TraceModel(link=link), traces, cfg.train_config(cfg.fit_steps), rng)
    else:
        model, _ = fit(model, traces, cfg.train_config(cfg.refit_steps), rng)
    return model


def _refit_classifier(X, y, cfg: SingleTuneConfig, model: TraceModel, seed: int) -> BernoulliSvgp | None:
    y = np.asarray(y)
    if not np.any(y == 1):
        return None
    X = np.array(X, dtype=float)
    X[:, 0] = model.normalizer.g(X[:, 0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return classifier_fit(X, y, ClassifierConfig(seed=seed % (2 ** 32)))


def audit_log(records: list[dict], config: SingleTuneConfig) -> dict:
    """Check the change cap and duplication invariants over a tuning log.

    Returns counts of segments, duplication events, cap violations and
    checkpoint mismatches (the last two must be zero).
    """
    segs = [r for r in records if "event" not in r and not r["superseded"]]
    dups = [r for r in records if r.get("event") == "duplicate"]
    cap_viol = 0
    ck_mismatch = 0
    by_k = {}
    for r in segs:
        by_k.setdefault(r["interval"], []).append(r)
    for k, rs in by_k.items():
        if k == 0:
            continue
        prev = {r["run"]: r for r in by_k[k - 1]}
        for r in rs:
            src = prev[r["duplicated_from"]]
            if abs(np.log10(r["rate"]) - np.log10(src["rate"])) > config.max_decade_change + 1e-12:
                cap_viol += 1
        if not config.keep_all and len({r["checkpoint_sha256"] for r in rs}) != 1:
            ck_mismatch += 1
    return {"segments": len(segs), "duplications": len(dups), "cap_violations": cap_viol,
            "checkpoint_mismatches": ck_mismatch}
