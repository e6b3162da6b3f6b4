"""GP-based NARX(q) model of optimiser traces.

Y_{k+1} = Y_k + eta(f(Y_k..Y_{k-q+1}, x_k..x_{k-q+1}[, w]), T_{k+1} - T_k)

with independent SVGP latents f_1..f_p, a Gaussian initial value Y_0 and
Gaussian observation noise. Everything inside the model lives on a
normalised scale (see :class:`YNormalizer`); elapsed time is divided by
``time_scale``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..gp import autodiff as ad
from ..gp.inducing import init_inducing
from ..gp.kernels import Matern52Kernel, ProductKernel, inv_softplus
from ..gp.optim import AdamConfig, differentiable, fit_parameters
from ..gp.svgp import SvgpModel, kl_to_prior, log_gaussian, model_from_dict, model_to_dict
from .dataset import TrainingSet, YNormalizer, build_training_set, usable
from .links import LinkFunction
from .schedule import Trace

log = logging.getLogger(__name__)


class InsufficientData(ValueError):
    pass


@dataclass
class InitialValueModel:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("initial-value variance must be positive")


def variance_floor(mean: float) -> float:
    return 1e-8 * max(1.0, mean * mean)


def fit_initial_values(values) -> InitialValueModel:
    """Maximum-likelihood Gaussian (divisor N) with a floored variance."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if len(v) < 2:
        raise InsufficientData(f"need at least 2 initial values, got {len(v)}")
    m0 = float(v.mean())
    return InitialValueModel(m0, max(float(np.mean((v - m0) ** 2)), variance_floor(m0)))


def fit_initial(traces: list[Trace]) -> InitialValueModel:
    """Gaussian for Y_0 fitted on the traces that start at T_0."""
    y0 = [tr.values[0] for tr in traces if len(tr.times) and tr.times[0] == 0]
    return fit_initial_values(y0)


@dataclass
class TrainConfig:
    adam: AdamConfig = field(default_factory=lambda: AdamConfig(steps=800, learning_rate=0.02))
    n_mc: int = 8
    num_inducing: int = 30
    lengthscale: float = 0.3
    embedding_lengthscale: float = 1.0
    kernel_variance: float = 1.0
    noise_variance: float = 1e-3
    jitter: float = 1e-6
    transform: str = "identity"
    embedding_dim: int = 0
    num_tasks: int = 1
    embedding_scale: float = 0.1
    train_embedding: bool = True
    seed: int = 0


@dataclass
class TraceModel:
    link: LinkFunction = LinkFunction.LINEAR
    order: int = 1
    latent: list = field(default_factory=list)
    initial: InitialValueModel | None = None
    noise_variance: object = 1e-3
    normalizer: YNormalizer = field(default_factory=YNormalizer)
    time_scale: float = 1.0
    embedding: object = None          # (M, L) task coordinates, None for single-task
    task_ids: list = field(default_factory=list)
    task_initial: dict = field(default_factory=dict)

    @property
    def fitted(self) -> bool:
        return bool(self.latent)

    @property
    def embedding_dim(self) -> int:
        return 0 if self.embedding is None else int(np.shape(ad.value(self.embedding))[1])

    @property
    def input_dim(self) -> int:
        return 2 * self.order + self.embedding_dim

    @property
    def num_tasks(self) -> int:
        return 1 if self.embedding is None else int(np.shape(ad.value(self.embedding))[0])

    def initial_for(self, task_index: int = 0) -> InitialValueModel:
        return self.task_initial.get(int(task_index), self.initial)

    def task_embedding(self, task_index: int) -> np.ndarray | None:
        if self.embedding is None:
            return None
        return np.asarray(ad.value(self.embedding))[task_index]

    # -- parameters -------------------------------------------------------
    def parameters(self, include=("latent", "noise", "embedding")) -> dict[str, np.ndarray]:
        out = {}
        if "latent" in include:
            for j, lat in enumerate(self.latent):
                out.update(lat.parameters(f"latent{j}."))
        if "noise" in include:
            out["noise_variance"] = inv_softplus(np.array(float(ad.value(self.noise_variance))))
        if "embedding" in include and self.embedding is not None:
            out["embedding"] = np.array(ad.value(self.embedding), dtype=float)
        return out

    def with_parameters(self, theta: dict) -> "TraceModel":
        latent = [lat.with_parameters(theta, f"latent{j}.") for j, lat in enumerate(self.latent)]
        noise = ad.softplus(theta["noise_variance"]) if "noise_variance" in theta else self.noise_variance
        emb = theta.get("embedding", self.embedding)
        return replace(self, latent=latent, noise_variance=noise, embedding=emb)

    def concrete(self) -> "TraceModel":
        return trace_model_from_dict(trace_model_to_dict(self))

    # -- latent inputs ----------------------------------------------------
    def latent_inputs(self, static, task_index=None, w=None):
        """Append task coordinates to the (Y, x) history inputs when multi-task."""
        if self.embedding is None:
            return static
        if w is None:
            w = ad.take(self.embedding, np.asarray(task_index, dtype=int), axis=0)
        return ad.concatenate([static, w], axis=-1)


def make_kernel(order: int, embedding_dim: int, cfg: TrainConfig):
    """k_Y * k_x (* k_Omega); only the k_Y factor carries a trainable variance."""
    q = order
    factors = [
        Matern52Kernel(cfg.kernel_variance, np.full(q, cfg.lengthscale), dims=tuple(range(q))),
        Matern52Kernel(1.0, np.full(q, cfg.lengthscale), dims=tuple(range(q, 2 * q)), train_variance=False),
    ]
    if embedding_dim:
        factors.append(Matern52Kernel(1.0, np.full(embedding_dim, cfg.embedding_lengthscale),
                                      dims=tuple(range(2 * q, 2 * q + embedding_dim)), train_variance=False))
    return ProductKernel(factors)


def _initial_offsets(link: LinkFunction, data: TrainingSet, time_scale: float) -> list[float]:
    """Constant latent values reproducing the average observed increment."""
    inc = data.target - data.base
    t = data.elapsed / time_scale
    pos = t > 0
    if link is LinkFunction.LINEAR:
        slope = float(np.mean(inc[pos] / t[pos])) if np.any(pos) else 0.1
        return [float(inv_softplus(max(slope, 1e-3)))]
    if link is LinkFunction.EXPONENTIAL:
        ends = {}
        for tr, k, v in zip(data.trace_index, data.interval, inc):
            ends[(tr, k)] = max(ends.get((tr, k), -np.inf), v)
        level = float(np.mean(list(ends.values()))) if ends else 0.1
        return [float(inv_softplus(max(level, 1e-3))), float(inv_softplus(3.0))]
    slope = float(np.mean(inc[pos] / t[pos])) if np.any(pos) else 0.0
    return [slope]


def initialise(model: TraceModel, data: TrainingSet, cfg: TrainConfig, rng: np.random.Generator) -> TraceModel:
    """Data-driven starting point: k-means++ inducing inputs, q(u) centred on a constant."""
    X = np.asarray(ad.value(model.latent_inputs(data.inputs, data.task_index)))
    offsets = _initial_offsets(model.link, data, model.time_scale)
    latent = []
    for j in range(model.link.p):
        kernel = make_kernel(model.order, model.embedding_dim, cfg)
        Z = init_inducing(X, cfg.num_inducing, rng)
        lat = SvgpModel.from_prior(kernel, Z, jitter=cfg.jitter, scale=0.3)
        lat.q.mean = np.full(len(Z), offsets[j])
        latent.append(lat)
    return replace(model, latent=latent, noise_variance=cfg.noise_variance)


def elbo(model: TraceModel, data: TrainingSet, eps: np.ndarray):
    """Monte-Carlo ELBO: sum_n E_q[log N(y_n | Y_k + eta(f, dt), s^2)] - sum_j KL_j.

    ``eps`` has shape (n_mc, n, p); tape-aware in every model parameter.
    """
    X = model.latent_inputs(data.inputs, data.task_index)
    t = data.elapsed / model.time_scale
    fs = []
    kl = 0.0
    for j, lat in enumerate(model.latent):
        mean, var = lat.projection().marginals(X)
        sd = ad.sqrt(ad.clip_min(var, 1e-12))
        fs.append(mean + sd * eps[:, :, j])
        kl = kl + kl_to_prior(lat)
    pred = data.base + model.link(fs, t)
    ll = log_gaussian(data.target, pred, model.noise_variance)
    return ad.sum(ad.mean(ll, axis=0)) - kl


def _prepare(model: TraceModel, traces, cfg: TrainConfig, rng):
    good = usable(traces)
    fresh = not model.fitted
    if fresh:
        vals = np.concatenate([tr.values for tr in good]) if good else np.zeros(0)
        normalizer = YNormalizer.fit(vals, cfg.transform)
        spans = [b - a for tr in good for a, b in zip(tr.schedule.breakpoints, tr.schedule.breakpoints[1:])]
        model = replace(model, normalizer=normalizer, time_scale=float(max(spans)) if spans else 1.0)
        if cfg.embedding_dim and model.embedding is None:
            M = max(max([tr.task_index for tr in good], default=0) + 1, cfg.num_tasks)
            model = replace(model, embedding=cfg.embedding_scale * rng.standard_normal((M, cfg.embedding_dim)))
    data = build_training_set(good, model.order, model.normalizer)
    if not len(data):
        raise InsufficientData("no usable training rows (all traces failed or too short)")
    model = _fit_initial_models(model, good)
    if fresh:
        model = initialise(model, data, cfg, rng)
    return model, data


def _fit_initial_models(model: TraceModel, traces: list[Trace]) -> TraceModel:
    """Pooled and per-task Gaussians for Y_0 on the transformed scale.

    A task with a single trace keeps its observed Y_0 as mean and borrows the
    pooled within-task variance.
    """
    starts = [(tr.task_index, float(model.normalizer.g(tr.values[0]))) for tr in traces
              if len(tr.times) and tr.times[0] == 0 and np.isfinite(tr.values[0])]
    if not starts:
        return model
    vals = np.array([v for _, v in starts])
    pooled = fit_initial_values(vals) if len(vals) >= 2 else InitialValueModel(vals[0], variance_floor(vals[0]))
    per_task, resid = {}, []
    for ti in sorted({t for t, _ in starts}):
        v = np.array([x for t, x in starts if t == ti])
        resid.extend(v - v.mean())
        per_task[ti] = v
    within = float(np.mean(np.square(resid))) if resid else 0.0
    task_initial = {}
    for ti, v in per_task.items():
        m0 = float(v.mean())
        var = float(np.mean((v - m0) ** 2)) if len(v) >= 2 else within
        task_initial[ti] = InitialValueModel(m0, max(var, variance_floor(m0)))
    if model.embedding is None:
        return replace(model, initial=pooled, task_initial={})
    return replace(model, initial=pooled, task_initial=task_initial)


def fit(model: TraceModel, traces: list[Trace], config: TrainConfig | None = None,
        rng: np.random.Generator | None = None, include=("latent", "noise", "embedding")) -> tuple[TraceModel, list[float]]:
    """Maximise the ELBO with Adam; returns the fitted model and per-step ELBO estimates.

    An unfitted model is initialised from the data first; a fitted one is
    warm-started from its current parameters.
    """
    cfg = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    model, data = _prepare(model, traces, cfg, rng)
    if not cfg.train_embedding:
        include = tuple(i for i in include if i != "embedding")
    theta0 = model.parameters(include)
    n, p = len(data), model.link.p

    def neg_elbo(theta):
        eps = rng.standard_normal((cfg.n_mc, n, p))
        return -elbo(model.with_parameters(theta), data, eps)

    res = fit_parameters(differentiable(neg_elbo), theta0, cfg.adam)
    fitted = model.with_parameters(res.params).concrete()
    return fitted, [-v for v in res.history]


def evaluate_elbo(model: TraceModel, traces: list[Trace], n_mc: int = 64, seed: int = 0) -> float:
    """ELBO estimate with a fixed set of draws (common random numbers across calls)."""
    data = build_training_set(usable(traces), model.order, model.normalizer)
    eps = np.random.default_rng(seed).standard_normal((n_mc, len(data), model.link.p))
    return float(ad.value(elbo(model, data, eps)))


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def trace_model_to_dict(model: TraceModel) -> dict:
    return {
        "link": model.link.value,
        "order": model.order,
        "latent": [model_to_dict(lat) for lat in model.latent],
        "initial": None if model.initial is None else {"mean": model.initial.mean, "variance": model.initial.variance},
        "task_initial": {str(k): {"mean": v.mean, "variance": v.variance} for k, v in sorted(model.task_initial.items())},
        "noise_variance": float(ad.value(model.noise_variance)),
        "normalizer": model.normalizer.to_dict(),
        "time_scale": float(model.time_scale),
        "embedding": None if model.embedding is None else np.asarray(ad.value(model.embedding)).tolist(),
        "task_ids": list(model.task_ids),
    }


def trace_model_from_dict(d: dict) -> TraceModel:
    init = d.get("initial")
    emb = d.get("embedding")
    return TraceModel(
        link=LinkFunction(d["link"]),
        order=int(d["order"]),
        latent=[model_from_dict(x) for x in d["latent"]],
        initial=None if init is None else InitialValueModel(init["mean"], init["variance"]),
        noise_variance=float(d["noise_variance"]),
        normalizer=YNormalizer(**d["normalizer"]),
        time_scale=float(d["time_scale"]),
        embedding=None if emb is None else np.array(emb, dtype=float).reshape(len(emb), -1),
        task_ids=list(d.get("task_ids", [])),
        task_initial={int(k): InitialValueModel(v["mean"], v["variance"]) for k, v in d.get("task_initial", {}).items()},
    )
