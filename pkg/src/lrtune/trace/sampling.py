"""Recursive sampling of trace trajectories from a fitted :class:`TraceModel`.

Each of the S trajectories carries its own conditioned latent posterior: after
f is drawn at the interval-k input, later draws condition on it. The state is
kept as an incremental Cholesky factor so conditioning costs O(k^2) per step,
and all array operations go through the tape so gradients can flow back to
schedule values.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..gp import autodiff as ad
from .model import TraceModel
from .schedule import Schedule

VARIANCE_FLOOR = 1e-9


class LatentConditioner:
    """Batched posterior of one latent GP conditioned on per-sample draws.

    With P = K^-1 - K^-1 S K^-1 the SVGP covariance is k(x, x') - k_Z(x)^T P k_Z(x').
    For past draws f_1..f_k (per sample) with whitened residuals a_j and
    Cholesky rows L_j of their joint covariance, a query point gets

        v_j = (Sigma(x_j, x) - sum_{l<j} L_jl v_l) / L_jj
        mean = mu(x) + sum_j v_j a_j,   var = s(x) - sum_j v_j^2

    A draw f = mean + sqrt(var) * eps appends the row (v_1..v_k, sqrt(var))
    with residual eps. State is kept as per-step lists so nothing is copied
    as the conditioning set grows.
    """

    def __init__(self, proj, n_samples: int):
        self.proj = proj
        self.S = n_samples
        self.X: list = []       # (S, D) inputs of past draws
        self.Pk: list = []      # (S, m)  P k_Z(x_j)
        self.rows: list = []    # rows[j][l] = L_jl, l < j, each (S,)
        self.piv: list = []     # L_jj, (S,)
        self.a: list = []       # whitened residuals, (S,)
        model = proj.model
        self.P = ad.matmul(ad.transpose(proj.Linv), proj.Linv) - ad.matmul(ad.transpose(proj.R), proj.R)
        self.floor = VARIANCE_FLOOR * float(ad.value(model.kernel.prior_variance))

    @property
    def k(self) -> int:
        return len(self.a)

    def take(self, index) -> "LatentConditioner":
        """Conditioner whose sample s is a copy of this one's sample index[s]."""
        new = LatentConditioner.__new__(LatentConditioner)
        new.proj, new.P, new.floor, new.S = self.proj, self.P, self.floor, len(index)
        tk = lambda v: ad.take(v, index, 0)
        new.X = [tk(x) for x in self.X]
        new.Pk = [tk(x) for x in self.Pk]
        new.rows = [[tk(x) for x in r] for r in self.rows]
        new.piv = [tk(x) for x in self.piv]
        new.a = [tk(x) for x in self.a]
        return new

    def query(self, Xq):
        """Conditional mean/variance at Xq (S, G, D); also returns the pieces ``append`` needs."""
        model = self.proj.model
        kZq = model.kernel(model.inducing_inputs, Xq)                       # (S, m, G)
        PkZq = ad.matmul(self.P, kZq)
        mean = ad.sum(kZq * ad.expand_dims(self.proj.alpha, -1), axis=-2)
        var = model.kernel.diag(Xq) - ad.sum(kZq * PkZq, axis=-2)
        vs = []
        for j in range(self.k):
            kxq = ad.getitem(model.kernel(ad.expand_dims(self.X[j], 1), Xq), (slice(None), 0))   # (S, G)
            c = kxq - ad.sum(ad.expand_dims(self.Pk[j], -1) * kZq, axis=-2)
            for l, Ljl in enumerate(self.rows[j]):
                c = c - ad.expand_dims(Ljl, -1) * vs[l]
            v = c / ad.expand_dims(self.piv[j], -1)
            vs.append(v)
            mean = mean + v * ad.expand_dims(self.a[j], -1)
            var = var - ad.square(v)
        return mean, ad.clip_min(var, self.floor), (PkZq, vs)

    def draw(self, Xn, eps):
        """Sample f at Xn (S, D) with standard normals ``eps`` (S,) and condition on it."""
        mean, var, (PkZq, vs) = self.query(ad.expand_dims(Xn, 1))
        first = (slice(None), 0)
        piv = ad.sqrt(ad.getitem(var, first))
        f = ad.getitem(mean, first) + piv * eps
        self.X.append(Xn)
        self.Pk.append(ad.getitem(PkZq, (slice(None), slice(None), 0)))
        self.rows.append([ad.getitem(v, first) for v in vs])
        self.piv.append(piv)
        self.a.append(np.asarray(eps, dtype=float))
        return f


def _column(v, S: int):
    """Broadcast a scalar or (S,) value to shape (S,), keeping tape links."""
    if np.ndim(ad.value(v)) == 0:
        return v * np.ones(S)
    return v


class Rollout:
    """S trajectories advanced one interval at a time (normalised units).

    ``Y`` and ``x`` are lists of per-interval arrays of shape (S,); the latent
    inputs at interval k are (Y_k..Y_{k-q+1}, x_k..x_{k-q+1}[, w]), padding
    with the earliest entry when fewer than q are available.
    """

    def __init__(self, model: TraceModel, y_start, n_samples: int, task_index: int = 0, w=None,
                 Y_hist=None, x_hist=None):
        self.model = model
        self.S = n_samples
        self.Y = list(Y_hist or []) + [_column(y_start, n_samples)]
        self.x = list(x_hist or [])
        if model.embedding is None:
            self.w = None
        else:
            w = model.task_embedding(task_index) if w is None else w
            w = np.asarray(w, dtype=float) if not isinstance(w, ad.Node) else w
            self.w = w if np.ndim(ad.value(w)) == 2 else np.broadcast_to(w, (n_samples, len(w)))
        self.cond = [LatentConditioner(lat.projection(), n_samples) for lat in model.latent]
        self.f: list = []

    def take(self, index) -> "Rollout":
        index = np.asarray(index, dtype=int)
        new = Rollout.__new__(Rollout)
        new.model = self.model
        new.S = len(index)
        new.Y = [ad.take(y, index, 0) for y in self.Y]
        new.x = [ad.take(x, index, 0) for x in self.x]
        new.w = None if self.w is None else ad.take(self.w, index, 0)
        new.cond = [c.take(index) for c in self.cond]
        new.f = [[ad.take(fj, index, 0) for fj in fk] for fk in self.f]
        return new

    def _inputs(self, x_now):
        q = self.model.order
        Ys = [self.Y[max(len(self.Y) - 1 - l, 0)] for l in range(q)]
        xs_hist = self.x + [x_now]
        xs = [xs_hist[max(len(xs_hist) - 1 - l, 0)] for l in range(q)]
        cols = ad.stack(Ys + xs, axis=-1)
        if self.w is not None:
            cols = ad.concatenate([cols, self.w], axis=-1)
        return cols

    def increment(self, f, dt: float):
        return self.model.link(f, dt / self.model.time_scale)

    def candidates(self, xgrid, dt: float, eps):
        """Y_{k+1} for every sample and every candidate rate in ``xgrid`` (G,), shape (S, G).

        Draws use the same ``eps`` (S, p) for all candidates (common random numbers).
        """
        xgrid = np.asarray(xgrid, dtype=float)
        G, S = len(xgrid), self.S
        X = ad.value(self._inputs(np.zeros(S)))
        X = np.repeat(np.asarray(X)[:, None, :], G, axis=1)
        X[:, :, self.model.order] = xgrid[None, :]
        fs = []
        for j, c in enumerate(self.cond):
            mean, var, _ = c.query(X)
            fs.append(np.asarray(ad.value(mean)) + np.sqrt(np.asarray(ad.value(var))) * eps[:, j:j + 1])
        y = np.asarray(ad.value(self.Y[-1]))[:, None]
        return y + np.asarray(ad.value(self.increment(fs, dt)))

    def step(self, x, dt: float, eps):
        """Advance all samples through one interval at rate(s) ``x``; returns the new Y."""
        x = _column(x, self.S)
        Xn = self._inputs(x)
        f = [c.draw(Xn, eps[:, j]) for j, c in enumerate(self.cond)]
        self.f.append(f)
        self.x.append(x)
        self.Y.append(self.Y[-1] + self.increment(f, dt))
        return self.Y[-1]

    def value_at(self, k: int, elapsed: float):
        """Trace value at T_k + elapsed within interval k (elapsed = 0 gives Y_k)."""
        if elapsed == 0 or k >= len(self.f):
            return self.Y[k]
        return self.Y[k] + self.increment(self.f[k], elapsed)


def initial_draws(model: TraceModel, n: int, rng: np.random.Generator, task_index: int = 0) -> np.ndarray:
    """Normalised Y_0 samples from the initial-value Gaussian."""
    init = model.initial_for(task_index)
    g = init.mean + np.sqrt(init.variance) * rng.standard_normal(n)
    return (g - model.normalizer.lo) / model.normalizer.span


@dataclass
class TrajectorySample:
    Y: np.ndarray      # (S, d + 1) boundary values on the original scale
    rollout: Rollout


def rollout_schedule(model: TraceModel, schedule: Schedule, n_samples: int, rng: np.random.Generator,
                     task_index: int = 0, w=None, deterministic: bool = False) -> Rollout:
    y0 = initial_draws(model, n_samples, rng, task_index)
    eps = rng.standard_normal((schedule.d, n_samples, model.link.p))
    if deterministic:
        eps[:] = 0.0
    ro = Rollout(model, y0, n_samples, task_index=task_index, w=w)
    bp = schedule.breakpoints
    for k in range(schedule.d):
        ro.step(schedule.values[k], bp[k + 1] - bp[k], eps[k])
    return ro


def sample_trajectories(model: TraceModel, schedule: Schedule, n_samples: int, record_times, rng: np.random.Generator,
                        task_index: int = 0, w=None, deterministic: bool = False) -> np.ndarray:
    """Trace values at ``record_times`` for ``n_samples`` trajectories, shape (n_samples, len(record_times)).

    Observation noise is not added. ``deterministic`` zeroes every latent draw
    so the recursion follows the posterior mean.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    times = np.atleast_1d(np.asarray(record_times))
    bp = schedule.breakpoints
    if np.any(times < 0) or np.any(times > bp[-1]):
        raise ValueError("record_times must lie within [T_0, T_d]")
    ro = rollout_schedule(model, schedule, n_samples, rng, task_index, w, deterministic)
    out = np.empty((n_samples, len(times)))
    for i, t in enumerate(times):
        k = min(int(np.searchsorted(bp, t, side="right") - 1), schedule.d)
        out[:, i] = np.asarray(ad.value(ro.value_at(k, t - bp[min(k, schedule.d)])))
    return model.normalizer.inverse(out)


def empirical_quantile(samples, alpha):
    """Type-7 quantile (linear interpolation between order statistics) along axis 0."""
    return np.quantile(np.asarray(samples, dtype=float), alpha, axis=0)


def predict_quantile(model: TraceModel, schedule: Schedule, t: int, alpha: float, n_samples: int = 256,
                     rng: np.random.Generator | None = None, task_index: int = 0) -> float:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    rng = rng if rng is not None else np.random.default_rng(0)
    ys = sample_trajectories(model, schedule, n_samples, [t], rng, task_index)[:, 0]
    return float(empirical_quantile(ys, alpha))
