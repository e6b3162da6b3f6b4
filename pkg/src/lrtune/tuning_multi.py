"""Multi-task schedule search with a shared trace model.

The latent GPs see (Y, x, w) where w is a learned per-task embedding. Each
round picks per-task reference schedules by greedy UCB, then runs the
(schedule, task) pair whose observation is expected to shrink the predictive
variance at those references the most. Also: universal and warm-start
schedules for a task that is new to the model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.spatial import Delaunay, QhullError
from scipy.stats import qmc

from .gp import autodiff as ad
from .gp.optim import AdamConfig, differentiable, fit_parameters
from .seeding import derive_rng, derive_seed
from .tasks import RunnerConfig, TaskSpec, run_schedule
from .trace.dataset import build_training_set, usable
from .trace.links import LinkFunction
from .trace.model import InitialValueModel, TraceModel, TrainConfig, elbo, fit, variance_floor
from .trace.sampling import Rollout, initial_draws
from .trace.schedule import Schedule, Trace

log = logging.getLogger(__name__)


class NoInformativeExperiment(RuntimeError):
    pass


@dataclass
class MultiTuneConfig:
    N0: int = 5
    N: int = 20
    d: int = 5
    total_steps: int = 1000
    L: int = 2
    alpha: float = 0.75
    alpha_rec: float = 0.5
    lr_min: float = 1e-3
    lr_max: float = 1.0
    link: str = "exponential"
    transform: str = "neglog"
    num_inducing: int = 50
    n_mc: int = 256
    n_mc_J: int = 256
    n_outer: int = 16
    n_inner: int = 64
    n_starts: int = 16
    grad_iters: int = 5
    grid_points: int = 65
    fit_steps: int = 800
    refit_steps: int = 300
    learning_rate: float = 0.02
    n_mc_elbo: int = 8
    n_hull: int = 64
    runner: RunnerConfig = field(default_factory=RunnerConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.5 < self.alpha < 1:
            raise ValueError("UCB level alpha must lie in (0.5, 1)")
        if not 0 < self.alpha_rec < 1:
            raise ValueError("alpha_rec must lie in (0, 1)")
        if self.N <= self.N0 or self.N0 < 1:
            raise ValueError("need N > N0 >= 1")
        if self.L < 1:
            raise ValueError("embedding dimension L must be >= 1")

    def schedule(self, values=None) -> Schedule:
        values = [0.5] * self.d if values is None else values
        return Schedule.uniform(self.total_steps, values, self.lr_min, self.lr_max)

    def train_config(self, steps: int, num_tasks: int) -> TrainConfig:
        return TrainConfig(adam=AdamConfig(steps=steps, learning_rate=self.learning_rate), n_mc=self.n_mc_elbo,
                           num_inducing=self.num_inducing, transform=self.transform, embedding_dim=self.L,
                           num_tasks=num_tasks, seed=self.seed)


# ---------------------------------------------------------------------------
# greedy per-interval search
# ---------------------------------------------------------------------------

def quantile_stat(alpha: float):
    return lambda Y: np.quantile(Y, alpha, axis=0)


def mean_stat(Y):
    return np.mean(Y, axis=0)


def _argmax_tie(values: np.ndarray, grid: np.ndarray, anchor: float) -> int:
    best = np.max(values)
    cand = np.nonzero(values >= best - 1e-12 * max(1.0, abs(best)))[0]
    return int(cand[np.argmin(np.abs(grid[cand] - anchor))])


@dataclass
class GreedyResult:
    values: np.ndarray        # chosen schedule values x_0..x_{d-1}
    stage_scores: np.ndarray  # objective of each greedy stage at its chosen x
    rollout: Rollout


def greedy_schedule(model: TraceModel, schedule: Schedule, stat, n_samples: int, rng: np.random.Generator,
                    task_index: int = 0, w=None, grid_points: int = 65, refine: bool = True,
                    y0=None) -> GreedyResult:
    """Choose x_0, x_1, ... one interval at a time, each maximising ``stat`` of Y_{k+1}.

    The S sampled trajectories are propagated through every chosen rate, and
    the same draws serve all candidates (common random numbers).
    """
    p, d, bp = model.link.p, schedule.d, schedule.breakpoints
    y0 = initial_draws(model, n_samples, rng, task_index) if y0 is None else y0
    eps = rng.standard_normal((d, n_samples, p))
    ro = Rollout(model, y0, n_samples, task_index=task_index, w=w)
    grid = np.linspace(0.0, 1.0, grid_points)
    xs, scores = [], []
    for k in range(d):
        dt = bp[k + 1] - bp[k]
        vals = stat(ro.candidates(grid, dt, eps[k]))
        anchor = xs[-1] if xs else 0.5
        i = _argmax_tie(vals, grid, anchor)
        x, s = float(grid[i]), float(vals[i])
        if refine:
            a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
            res = minimize_scalar(lambda z: -float(stat(ro.candidates([z], dt, eps[k]))[0]), bounds=(a, b),
                                  method="bounded", options={"xatol": 1e-4})
            if res.success and -res.fun > s + 1e-12 * max(1.0, abs(s)):
                x, s = float(res.x), float(-res.fun)
        ro.step(x, dt, eps[k])
        xs.append(x)
        scores.append(s)
    return GreedyResult(np.array(xs), np.array(scores), ro)


def ucb_maximizer(model: TraceModel, task_index: int, alpha: float, rng: np.random.Generator,
                  config: MultiTuneConfig | None = None, schedule: Schedule | None = None) -> np.ndarray:
    cfg = config or MultiTuneConfig()
    sched = schedule or cfg.schedule()
    return greedy_schedule(model, sched, quantile_stat(alpha), cfg.n_mc, rng, task_index,
                           grid_points=cfg.grid_points).values


# ---------------------------------------------------------------------------
# uncertainty of the reference maximisers
# ---------------------------------------------------------------------------

def _final_values(ro: Rollout):
    return ro.Y[-1]


def _reference_rollout(model, refs, task_indices, n_per, base: Rollout | None, rng_eps, rng_y0, bp, w_override=None):
    """Trajectories of every reference schedule; returns normalised Y_d of shape (len(refs) * n_per_total,)."""
    M = len(refs)
    if base is None:
        S = M * n_per
        ro = Rollout(model, np.zeros(S), S, task_index=0)
    else:
        S = M * base.S * n_per
        ro = base.take(np.tile(np.repeat(np.arange(base.S), n_per), M))
    task_of = np.repeat(np.arange(M), S // M)
    y0 = np.concatenate([initial_draws(model, S // M, rng_y0, task_indices[i]) for i in range(M)])
    ro.Y = [ro.Y[0] * 0 + y0] if base is None else [y0]
    ro.x, ro.f = [], []
    if model.embedding is not None:
        W = np.asarray(ad.value(model.embedding)) if w_override is None else w_override
        ro.w = W[np.asarray(task_indices)[task_of]]
    X = np.asarray(refs, dtype=float)[task_of]      # (S, d)
    eps = rng_eps.standard_normal((len(bp) - 1, S, model.link.p))
    for k in range(len(bp) - 1):
        ro.step(X[:, k], bp[k + 1] - bp[k], eps[k])
    return ro, task_of


def uncertainty_J(model: TraceModel, refs, n_mc: int, rng: np.random.Generator, schedule: Schedule | None = None,
                  task_indices=None, return_stderr: bool = False):
    """Mean over tasks of Var[Y_d] at each task's reference schedule (model scale, no observation noise)."""
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    M = len(refs)
    task_indices = list(range(M)) if task_indices is None else list(task_indices)
    sched = schedule or Schedule.uniform(1000, refs[0])
    ro, task_of = _reference_rollout(model, refs, task_indices, n_mc, None, rng, rng, sched.breakpoints)
    Y = np.asarray(ad.value(ro.Y[-1])).reshape(M, n_mc)
    var = Y.var(axis=1, ddof=1)
    J = float(var.mean())
    if not return_stderr:
        return J
    # var of a sample variance ~ (m4 - s^4 (n-3)/(n-1)) / n
    m4 = np.mean((Y - Y.mean(axis=1, keepdims=True)) ** 4, axis=1)
    se_i = np.sqrt(np.maximum(m4 - var ** 2 * (n_mc - 3) / (n_mc - 1), 0.0) / n_mc)
    return J, float(np.sqrt(np.sum(se_i ** 2)) / M)


def expected_reduced_J(model: TraceModel, x, task_index: int, refs, n_outer: int, n_inner: int,
                       rng: np.random.Generator, schedule: Schedule | None = None, task_indices=None,
                       return_stderr: bool = False):
    """E[J-bar]: J after conditioning the latents on a run of schedule ``x`` on ``task_index``.

    Outer loop: ``n_outer`` latent trajectories along the candidate; inner
    loop: for each, ``n_inner`` trajectories of every reference schedule from
    the conditioned posterior. Tape-aware in ``x``.
    """
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    M = len(refs)
    task_indices = list(range(M)) if task_indices is None else list(task_indices)
    sched = schedule or Schedule.uniform(1000, refs[0])
    bp = sched.breakpoints
    seeds = rng.integers(2 ** 63, size=3)
    r_outer, r_inner, r_y0 = (np.random.default_rng(int(s)) for s in seeds)
    y0 = initial_draws(model, n_outer, r_outer, task_index)
    outer = Rollout(model, y0, n_outer, task_index=task_index)
    eps = r_outer.standard_normal((sched.d, n_outer, model.link.p))
    for k in range(sched.d):
        outer.step(ad.getitem(x, k), bp[k + 1] - bp[k], eps[k])
    ro, _ = _reference_rollout(model, refs, task_indices, n_inner, outer, r_inner, r_y0, bp)
    Y = ad.reshape(ro.Y[-1], (M, n_outer, n_inner))
    mu = ad.mean(Y, axis=2, keepdims=True)
    var = ad.sum(ad.square(Y - mu), axis=2) / (n_inner - 1)   # (M, n_outer)
    value = ad.mean(var)
    if not return_stderr:
        return value
    per_outer = np.asarray(ad.value(ad.mean(var, axis=0)))
    return value, float(per_outer.std(ddof=1) / np.sqrt(n_outer))


@dataclass
class Selection:
    x: np.ndarray
    task_index: int
    value: float
    per_task: dict


def select_next_run(model: TraceModel, refs, config: MultiTuneConfig, rng: np.random.Generator,
                    schedule: Schedule | None = None, tasks=None, starts=None) -> Selection:
    """Minimise E[J-bar] over x for every task; return the overall best (x, task).

    For each task: best of ``n_starts`` random starts, then L-BFGS-B with
    tape gradients on a frozen set of draws (common random numbers).
    """
    sched = schedule or config.schedule()
    refs = np.atleast_2d(np.asarray(refs, dtype=float))
    tasks = list(range(len(refs))) if tasks is None else list(tasks)
    if starts is None:
        starts = derive_rng(config.seed, "starts").uniform(0.0, 1.0, (config.n_starts, sched.d))
    crn_seed = int(rng.integers(2 ** 63))
    per_task = {}
    best = None
    for j in tasks:
        def value(xv):
            return float(ad.value(expected_reduced_J(model, xv, j, refs, config.n_outer, config.n_inner,
                                                     np.random.default_rng(crn_seed), sched)))

        def value_grad(xv):
            v, g = ad.value_and_grad(
                lambda th: expected_reduced_J(model, th["x"], j, refs, config.n_outer, config.n_inner,
                                              np.random.default_rng(crn_seed), sched), {"x": np.asarray(xv, float)})
            return v, np.asarray(g["x"], dtype=float)

        vals = [value(s) for s in starts]
        i0 = int(np.argmin(vals))
        x_best, v_best = np.asarray(starts[i0], float), float(vals[i0])
        if config.grad_iters > 0:
            res = minimize(value_grad, x_best, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * sched.d,
                           options={"maxiter": config.grad_iters, "maxfun": 2 * config.grad_iters})
            if np.isfinite(res.fun) and res.fun < v_best:
                x_best, v_best = np.clip(res.x, 0.0, 1.0), float(res.fun)
        per_task[j] = (x_best, v_best)
        if best is None or v_best < best[1]:
            best = (x_best, v_best, j)
    return Selection(best[0], best[2], best[1], per_task)


# ---------------------------------------------------------------------------
# Alg. 2 driver
# ---------------------------------------------------------------------------

@dataclass
class MultiTuneResult:
    recommended: dict          # task_id -> Schedule
    model: TraceModel
    log: list
    traces: list
    J_history: list
    tasks: list


def latin_hypercube(n: int, d: int, seed: int) -> np.ndarray:
    return qmc.LatinHypercube(d=d, seed=np.random.default_rng(seed)).random(n)


def fit_multi(model: TraceModel | None, traces, config: MultiTuneConfig, M: int, seed: int, index: int) -> TraceModel:
    rng = derive_rng(seed, "fit", index)
    if model is None:
        m, _ = fit(TraceModel(link=LinkFunction(config.link)), traces, config.train_config(config.fit_steps, M), rng)
    else:
        m, _ = fit(model, traces, config.train_config(config.refit_steps, M), rng)
    return m


def run_multi_tuning(tasks: list[TaskSpec], config: MultiTuneConfig | None = None,
                     rng: np.random.Generator | None = None, callback=None) -> MultiTuneResult:
    cfg = config or MultiTuneConfig()
    seed = cfg.seed if rng is None else int(rng.integers(2 ** 63))
    M = len(tasks)
    if M < 1:
        raise ValueError("need at least one task")
    sched0 = cfg.schedule()
    cfg.runner.check_schedule(sched0)
    traces: list[Trace] = []
    records: list[dict] = []
    design = latin_hypercube(cfg.N0, cfg.d, derive_seed(seed, "lhs"))
    for n in range(cfg.N0):
        j = n % M
        tr = run_schedule(tasks[j], cfg.schedule(design[n]), cfg.runner, derive_rng(seed, "run", n),
                          run_id=f"run{n}", task_index=j)
        traces.append(tr)
        records.append(_run_record(n, None, tasks[j], tr, None, None))
    model = fit_multi(None, traces, cfg, M, seed, 0)
    J_hist = []
    for r in range(cfg.N - cfg.N0):
        refs = np.array([ucb_maximizer(model, i, cfg.alpha, derive_rng(seed, "ucb"), cfg) for i in range(M)])
        J = uncertainty_J(model, refs, cfg.n_mc_J, derive_rng(seed, "J"), sched0)
        J_hist.append(J)
        sel = select_next_run(model, refs, cfg, derive_rng(seed, "select", r), sched0)
        n = cfg.N0 + r
        tr = run_schedule(tasks[sel.task_index], cfg.schedule(sel.x), cfg.runner, derive_rng(seed, "run", n),
                          run_id=f"run{n}", task_index=sel.task_index)
        traces.append(tr)
        records.append(_run_record(n, r, tasks[sel.task_index], tr, sel.value, J))
        model = fit_multi(model, traces, cfg, M, seed, r + 1)
        if callback is not None:
            callback(r, model, refs, J)
    rec = {tasks[i].task_id: cfg.schedule(ucb_maximizer(model, i, cfg.alpha_rec, derive_rng(seed, "rec", i), cfg))
           for i in range(M)}
    model = replace(model, task_ids=[t.task_id for t in tasks])
    return MultiTuneResult(rec, model, records, traces, J_hist, tasks)


def _run_record(n, rnd, task, tr: Trace, acq, J) -> dict:
    return {"run": n, "round": rnd, "task_id": task.task_id, "schedule": list(tr.schedule.values),
            "final_value": None if tr.failed else tr.final_value, "failed": bool(tr.failed),
            "acquisition_value": acq, "J": J}


# ---------------------------------------------------------------------------
# warm start for a new task
# ---------------------------------------------------------------------------

def sample_hull(W: np.ndarray, n: int, rng: np.random.Generator, max_proposals: int = 10_000) -> np.ndarray:
    """Uniform draws from the convex hull of the rows of W.

    Rejection from the bounding box (up to ``max_proposals`` proposals); if
    that does not yield enough points, or the hull is degenerate, the rest are
    convex combinations with flat Dirichlet weights over the vertices.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    M, L = W.shape
    if M == 1 or np.allclose(W, W[0]):
        return np.repeat(W[:1], n, axis=0)
    if L == 1:
        return rng.uniform(W.min(), W.max(), (n, 1))
    lo, hi = W.min(axis=0), W.max(axis=0)
    out = np.zeros((0, L))
    try:
        tri = Delaunay(W) if M > L else None
    except QhullError:
        tri = None
    if tri is None and M == 2:
        return W[0] + rng.uniform(0, 1, (n, 1)) * (W[1] - W[0])
    if tri is not None:
        used = 0
        while len(out) < n and used < max_proposals:
            batch = min(max(4 * n, 256), max_proposals - used)
            prop = rng.uniform(lo, hi, (batch, L))
            used += batch
            out = np.vstack([out, prop[tri.find_simplex(prop) >= 0]])
    if len(out) < n:
        wts = rng.dirichlet(np.ones(M), n - len(out))
        out = np.vstack([out, wts @ W])
    return out[:n]


def universal_schedule(model: TraceModel, config: MultiTuneConfig, rng: np.random.Generator,
                       schedule: Schedule | None = None) -> np.ndarray:
    """Greedy schedule maximising the mean final value averaged over w uniform on the embedding hull."""
    sched = schedule or config.schedule()
    W = np.asarray(ad.value(model.embedding))
    w = sample_hull(W, config.n_mc, rng)
    init = model.initial
    y0 = (init.mean + np.sqrt(init.variance) * rng.standard_normal(config.n_mc) - model.normalizer.lo) / model.normalizer.span
    return greedy_schedule(model, sched, mean_stat, config.n_mc, rng, w=w, grid_points=config.grid_points,
                           y0=y0).values


def variance_ratio(model: TraceModel, xs, W_samples: np.ndarray, n_traj: int, rng_seed: int,
                   schedule: Schedule) -> tuple[np.ndarray, np.ndarray]:
    """Per record time t in (0, T_i]: E_w[Var(Y|w)] / Var(Y) and Var(Y).

    Record times are the breakpoints and interval midpoints of the prefix.
    Both variances use the same divisor, so each ratio lies in [0, 1].
    """
    rng = np.random.default_rng(rng_seed)
    nw = len(W_samples)
    S = nw * n_traj
    init = model.initial
    g0 = init.mean + np.sqrt(init.variance) * rng.standard_normal(S)
    y0 = (g0 - model.normalizer.lo) / model.normalizer.span
    w = np.repeat(W_samples, n_traj, axis=0)
    ro = Rollout(model, y0, S, w=w)
    bp = schedule.breakpoints
    eps = rng.standard_normal((len(xs), S, model.link.p))
    cols = []
    for k, x in enumerate(xs):
        dt = bp[k + 1] - bp[k]
        ro.step(float(x), dt, eps[k])
        cols.append(np.asarray(ad.value(ro.value_at(k, dt / 2))))
        cols.append(np.asarray(ad.value(ro.Y[-1])))
    Y = np.stack(cols, axis=1).reshape(nw, n_traj, -1)
    total = Y.reshape(S, -1).var(axis=0)
    within = Y.var(axis=1).mean(axis=0)
    ratio = np.where(total > 1e-12, np.clip(within / np.maximum(total, 1e-300), 0.0, 1.0), 1.0)
    return ratio, total


def warm_start_schedule(model: TraceModel, i: int, config: MultiTuneConfig, rng: np.random.Generator,
                        n_w: int = 32, n_traj: int = 32, n_candidates: int = 64) -> tuple[np.ndarray, float]:
    """Prefix x_{:i} whose outcome is most informative about the task embedding.

    The score is sum_t E_w[Var(Y|w)] / Var(Y) over record times up to T_i;
    a low score means most of the predictive variance is due to w, so the
    prefix minimising it is returned (ties go to the midpoint schedule).
    """
    if i < 1:
        raise ValueError("prefix length must be >= 1")
    sched = config.schedule()
    W = np.asarray(ad.value(model.embedding))
    Ws = sample_hull(W, n_w, rng)
    crn = int(rng.integers(2 ** 63))
    mid = np.full(i, 0.5)
    r_mid, tot = variance_ratio(model, mid, Ws, n_traj, crn, sched)
    cands = np.vstack([mid, latin_hypercube(n_candidates, i, crn % (2 ** 32))])
    scores, informative = [], tot.max() > 1e-12
    for c in cands:
        r, tot = variance_ratio(model, c, Ws, n_traj, crn, sched)
        informative |= tot.max() > 1e-12
        scores.append(float(r.sum()))
    if not informative:
        raise NoInformativeExperiment("predictive variance is zero for every candidate prefix")
    scores = np.array(scores)
    if np.ptp(scores) <= 1e-9 * max(1.0, np.abs(scores).max()):
        return mid, float(scores[0])
    best = int(np.argmin(scores))
    res = minimize(lambda z: variance_ratio(model, np.clip(z, 0, 1), Ws, n_traj, crn, sched)[0].sum(),
                   cands[best], method="Powell", bounds=[(0.0, 1.0)] * i, options={"maxiter": 200, "xtol": 1e-3})
    if res.fun < scores[best]:
        return np.clip(res.x, 0.0, 1.0), float(res.fun)
    return cands[best], float(scores[best])


@dataclass
class EmbeddingEstimate:
    w: np.ndarray
    model: TraceModel
    elbo: float
    start_elbos: list
    task_index: int


def estimate_new_task_embedding(model: TraceModel, new_traces: list[Trace], rng: np.random.Generator,
                                steps: int = 150, learning_rate: float = 0.05, n_mc: int = 16) -> EmbeddingEstimate:
    """Fit w_new by maximising the ELBO of the new traces with every other parameter frozen.

    Starts: each known embedding and the centroid; the best end point (on a
    shared set of draws) wins.
    """
    good = usable(new_traces)
    if not new_traces:
        raise ValueError("need at least one trace of the new task")
    W = np.asarray(ad.value(model.embedding))
    M, L = W.shape
    traces = [replace(tr, task_index=M) for tr in good]
    data = build_training_set(traces, model.order, model.normalizer)
    base = replace(model, embedding=np.vstack([W, W.mean(axis=0)]))
    eps_fixed = rng.standard_normal((n_mc, len(data), model.link.p))

    def objective(w):
        emb = ad.concatenate([W, ad.reshape(w, (1, L))], axis=0)
        return elbo(replace(model, embedding=emb), data, eps_fixed)

    starts = list(W) + [W.mean(axis=0)]
    start_vals, ends = [], []
    for s in starts:
        start_vals.append(float(ad.value(objective(np.asarray(s)))))
        if len(data):
            res = fit_parameters(differentiable(lambda th: -objective(th["w"])), {"w": np.array(s, dtype=float)},
                                 AdamConfig(steps=steps, learning_rate=learning_rate))
            w_end = res.params["w"]
        else:
            w_end = np.array(s)
        ends.append((float(ad.value(objective(w_end))), w_end))
    candidates = ends + list(zip(start_vals, [np.asarray(s, float) for s in starts]))
    val, w_new = max(candidates, key=lambda t: t[0])
    y0 = [float(model.normalizer.g(tr.values[0])) for tr in good if tr.times[0] == 0]
    task_initial = dict(model.task_initial)
    if y0:
        m0 = float(np.mean(y0))
        pooled = model.initial.variance if model.initial is not None else variance_floor(m0)
        var = float(np.var(y0)) if len(y0) > 1 else pooled
        task_initial[M] = InitialValueModel(m0, max(var, variance_floor(m0)))
    new_model = replace(base, embedding=np.vstack([W, w_new]), task_initial=task_initial)
    return EmbeddingEstimate(np.asarray(w_new), new_model, val, start_vals, M)
