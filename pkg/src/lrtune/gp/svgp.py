"""Sparse variational GP: posterior marginals, KL term, sampling and conditioning.

The variational distribution is the *unwhitened* q(u) = N(m, S) over the
inducing values u = f(Z), with S = L_q L_q^T. All computations go through the
precomputed :class:`Projection` so batched queries (used by the trajectory
sampler) cost a couple of matrix products.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .kernels import Matern52Kernel, ProductKernel, inv_softplus, kernel_from_dict
from .linalg import NotPositiveDefinite, robust_cholesky

LOG_2PI = float(np.log(2.0 * np.pi))


class _ClipCounter:
    """Counts negative predictive variances clipped to zero."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def add(self, n: int) -> None:
        if n:
            with self._lock:
                self.count += int(n)


variance_clips = _ClipCounter()


@dataclass
class VariationalGaussian:
    mean: object
    scale: object

    @property
    def cov(self) -> np.ndarray:
        L = ad.value(self.scale)
        return L @ L.T

    @classmethod
    def from_cov(cls, mean, cov) -> "VariationalGaussian":
        return cls(np.asarray(mean, dtype=float), np.linalg.cholesky(np.asarray(cov, dtype=float)))


@dataclass
class SvgpModel:
    """Kernel, inducing inputs and q(u) for one latent function.

    ``jitter`` is relative: ``jitter * mean(diag(K_ZZ))`` is added before
    factorising K_ZZ.
    """

    kernel: object
    inducing_inputs: object
    q: VariationalGaussian
    jitter: float = 1e-6
    train_inducing: bool = True

    def __post_init__(self):
        Z = ad.value(self.inducing_inputs)
        m = np.shape(Z)[0]
        if np.shape(ad.value(self.q.mean)) != (m,) or np.shape(ad.value(self.q.scale)) != (m, m):
            raise ValueError("variational parameters do not match the inducing set")

    @classmethod
    def from_prior(cls, kernel, Z, jitter: float = 1e-6, scale: float = 1.0, **kw) -> "SvgpModel":
        """q(u) initialised to the prior (times ``scale``) with zero mean."""
        Z = np.asarray(Z, dtype=float)
        K = np.asarray(ad.value(kernel(Z, Z)))
        L, _ = robust_cholesky(K, jitter * float(np.mean(np.diag(K))))
        return cls(kernel, Z, VariationalGaussian(np.zeros(len(Z)), scale * L), jitter=jitter, **kw)

    @property
    def num_inducing(self) -> int:
        return int(np.shape(ad.value(self.inducing_inputs))[0])

    @property
    def input_dim(self) -> int:
        return int(np.shape(ad.value(self.inducing_inputs))[1])

    # -- parameters -------------------------------------------------------
    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        p = prefix
        out = self.kernel.parameters(f"{p}kernel")
        if self.train_inducing:
            out[f"{p}inducing_inputs"] = np.array(ad.value(self.inducing_inputs), dtype=float)
        L = np.array(ad.value(self.q.scale), dtype=float)
        raw = np.tril(L, -1)
        raw[np.diag_indices_from(raw)] = inv_softplus(np.diag(L))
        out[f"{p}q.mean"] = np.array(ad.value(self.q.mean), dtype=float)
        out[f"{p}q.scale_raw"] = raw
        return out

    def with_parameters(self, theta: dict, prefix: str = "") -> "SvgpModel":
        p = prefix
        kernel = self.kernel.with_parameters(theta, f"{p}kernel")
        Z = theta.get(f"{p}inducing_inputs", self.inducing_inputs)
        mean = theta.get(f"{p}q.mean", self.q.mean)
        scale = self.q.scale
        if f"{p}q.scale_raw" in theta:
            raw = theta[f"{p}q.scale_raw"]
            m = np.shape(ad.value(raw))[0]
            strict = np.tril(np.ones((m, m)), -1)
            scale = raw * strict + np.eye(m) * ad.expand_dims(ad.softplus(ad.diagonal(raw)), 0)
        return replace(self, kernel=kernel, inducing_inputs=Z, q=VariationalGaussian(mean, scale))

    def concrete(self) -> "SvgpModel":
        """Copy with every tape node replaced by its numeric value."""
        return model_from_dict(model_to_dict(self))

    # -- predictions ------------------------------------------------------
    def projection(self) -> "Projection":
        return Projection.build(self)

    def posterior(self, X, full_cov: bool = False):
        return posterior(self, X, full_cov=full_cov)

    def condition_on_values(self, Xc, fc) -> "ConditionedPosterior":
        return condition_on_values(self, Xc, fc)


@dataclass
class Projection:
    """Cached K_ZZ factorisation for fast marginal and cross-covariance queries.

    For a query set X with k_Z = k(Z, X):
      A = L_K^{-1} k_Z,  C = R k_Z  with R = L_q^T K^{-1}
      mean = alpha^T k_Z with alpha = K^{-1} m
      cov(X, X') = k(X, X') - A^T A' + C^T C'
    """

    model: SvgpModel
    Linv: object
    alpha: object
    R: object
    L: object

    @classmethod
    def build(cls, model: SvgpModel) -> "Projection":
        Z = model.inducing_inputs
        Kzz = model.kernel(Z, Z)
        jit = model.jitter * float(np.mean(np.diag(ad.value(Kzz))))
        L = ad.cholesky(Kzz, jitter=jit)
        m = model.num_inducing
        Linv = ad.solve_triangular(L, np.eye(m), lower=True)
        Kinv = ad.matmul(ad.transpose(Linv), Linv)
        alpha = ad.matmul(Kinv, model.q.mean)
        R = ad.matmul(ad.transpose(model.q.scale), Kinv)
        return cls(model, Linv, alpha, R, L)

    def features(self, X):
        """Return (kZX, A, C) for a batch of points X (..., n, D)."""
        kZX = self.model.kernel(self.model.inducing_inputs, X)
        return kZX, ad.matmul(self.Linv, kZX), ad.matmul(self.R, kZX)

    def marginals(self, X, clip: bool = True):
        kZX, A, C = self.features(X)
        mean = ad.sum(kZX * ad.expand_dims(self.alpha, -1), axis=-2)
        var = self.model.kernel.diag(X) - ad.sum(ad.square(A), axis=-2) + ad.sum(ad.square(C), axis=-2)
        if clip:
            v = ad.value(var)
            neg = v < 0
            if np.any(neg):
                variance_clips.add(int(np.sum(neg)))
            var = ad.clip_min(var, 0.0)
        return mean, var

    def full(self, X):
        kZX, A, C = self.features(X)
        mean = ad.sum(kZX * ad.expand_dims(self.alpha, -1), axis=-2)
        cov = self.model.kernel(X, X) - ad.matmul(ad.transpose(A), A) + ad.matmul(ad.transpose(C), C)
        return mean, cov


def posterior(model: SvgpModel, X, full_cov: bool = False):
    """Mean and (marginal variances | full covariance) of q(f) at the rows of X.

    Negative marginal variances are clipped at zero and counted in
    :data:`variance_clips`.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.input_dim:
        raise ValueError(f"query dimension {X.shape[1]} does not match model dimension {model.input_dim}")
    proj = model.projection()
    if full_cov:
        mean, cov = proj.full(X)
        return np.asarray(ad.value(mean)), np.asarray(ad.value(cov))
    mean, var = proj.marginals(X)
    return np.asarray(ad.value(mean)), np.asarray(ad.value(var))


def kl_to_prior(model: SvgpModel):
    """KL[N(m, S) || N(0, K_ZZ)] in closed form (tape-aware)."""
    Z = model.inducing_inputs
    Kzz = model.kernel(Z, Z)
    jit = model.jitter * float(np.mean(np.diag(ad.value(Kzz))))
    L = ad.cholesky(Kzz, jitter=jit)
    Lq = model.q.scale
    m = model.num_inducing
    LinvLq = ad.solve_triangular(L, Lq, lower=True)
    Linvm = ad.solve_triangular(L, model.q.mean, lower=True)
    trace_term = ad.sum(ad.square(LinvLq))
    maha = ad.sum(ad.square(Linvm))
    logdet_k = 2.0 * ad.sum(ad.log(ad.diagonal(L)))
    logdet_s = ad.sum(ad.log(ad.square(ad.diagonal(Lq))))
    return 0.5 * (trace_term + maha - m + logdet_k - logdet_s)


def sample_posterior(model: SvgpModel, X, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Joint draws from q(f) at X, shape (n_samples, len(X))."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mean, cov = posterior(model, X, full_cov=True)
    cov = 0.5 * (cov + cov.T)
    L = _psd_factor(cov)
    eps = rng.standard_normal((n_samples, len(mean)))
    return mean[None, :] + eps @ L.T


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """Cholesky factor, falling back to a clipped eigen-factor for rank-deficient matrices."""
    try:
        return robust_cholesky(cov, 0.0)[0]
    except NotPositiveDefinite:
        w, V = np.linalg.eigh(cov)
        variance_clips.add(int(np.sum(w < 0)))
        return V * np.sqrt(np.clip(w, 0.0, None))[None, :]


class ConditionedPosterior:
    """q(f) additionally conditioned on noise-free values f(X_c) = f_c.

    Chaining is genuinely recursive: each level conditions its parent's
    posterior, so two chained one-point updates and one joint two-point update
    are computed along different paths.
    """

    def __init__(self, parent, Xc, fc):
        self.parent = parent
        self.Xc = np.atleast_2d(np.asarray(Xc, dtype=float))
        self.fc = np.atleast_1d(np.asarray(fc, dtype=float))
        if len(self.Xc) != len(self.fc):
            raise ValueError("|X_c| must equal |f_c|")
        if len(self.fc):
            mc, Scc = self.parent.posterior(self.Xc, full_cov=True)
            Scc = 0.5 * (Scc + Scc.T)
            try:
                L = np.linalg.cholesky(Scc)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite("singular conditioning set") from exc
            scale = max(float(np.max(np.diag(Scc))), np.finfo(float).tiny)
            if np.min(np.diag(L)) ** 2 < 1e-12 * scale:
                raise NotPositiveDefinite("singular conditioning set")
            self._L = L
            self._resid = scipy.linalg.solve_triangular(L, self.fc - mc, lower=True)

    @property
    def input_dim(self) -> int:
        return self.parent.input_dim

    def posterior(self, X, full_cov: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not len(self.fc):
            return self.parent.posterior(X, full_cov=full_cov)
        n = len(X)
        mean_all, cov_all = self.parent.posterior(np.vstack([X, self.Xc]), full_cov=True)
        Sxc = cov_all[:n, n:]
        V = scipy.linalg.solve_triangular(self._L, Sxc.T, lower=True)
        mean = mean_all[:n] + V.T @ self._resid
        if full_cov:
            return mean, cov_all[:n, :n] - V.T @ V
        var = np.diag(cov_all[:n, :n]) - np.sum(V * V, axis=0)
        neg = var < 0
        if np.any(neg):
            variance_clips.add(int(np.sum(neg)))
        return mean, np.maximum(var, 0.0)

    def condition_on_values(self, Xc, fc) -> "ConditionedPosterior":
        return ConditionedPosterior(self, Xc, fc)


def condition_on_values(model, Xc, fc) -> ConditionedPosterior:
    """Condition a (possibly already conditioned) posterior on f(X_c) = f_c."""
    return ConditionedPosterior(model, Xc, fc)


# ---------------------------------------------------------------------------
# expectations
# ---------------------------------------------------------------------------

def log_gaussian(y, mean, var):
    """Elementwise log N(y | mean, var) (tape-aware in ``mean`` and ``var``)."""
    return -0.5 * (LOG_2PI + ad.log(var)) - 0.5 * ad.square(y - mean) / var


def expected_log_gaussian(mu_f, var_f, transform, y, noise_var, n_mc: int, rng: np.random.Generator,
                          return_stderr: bool = False):
    """Monte-Carlo estimate of E_{f ~ N(mu_f, var_f)}[log N(y | transform(f), noise_var)].

    Draws are reparameterised as f = mu_f + sqrt(var_f) * eps. Inputs broadcast
    elementwise; the estimate has the broadcast shape.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    mu_f, var_f, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu_f, var_f, y)))
    if np.any(var_f < 0) or noise_var <= 0:
        raise ValueError("variances must be non-negative and noise variance positive")
    eps = rng.standard_normal((n_mc,) + mu_f.shape)
    f = mu_f + np.sqrt(var_f) * eps
    ll = log_gaussian(y, transform(f), noise_var)
    est = ll.mean(axis=0)
    if not return_stderr:
        return float(est) if est.ndim == 0 else est
    se = ll.std(axis=0, ddof=1) / np.sqrt(n_mc) if n_mc > 1 else np.full_like(est, np.inf)
    if est.ndim == 0:
        return float(est), float(se)
    return est, se


_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_hermite(n: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for E_{N(0,1)}[g(z)] ~= sum_i w_i g(z_i)."""
    if n not in _GH_CACHE:
        t, w = np.polynomial.hermite.hermgauss(n)
        _GH_CACHE[n] = (np.sqrt(2.0) * t, w / np.sqrt(np.pi))
    return _GH_CACHE[n]


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def model_to_dict(model: SvgpModel) -> dict:
    """Plain-JSON representation; floats keep full precision through ``repr``."""
    L = np.asarray(ad.value(model.q.scale), dtype=float)
    m = L.shape[0]
    rows, cols = np.tril_indices(m)
    k = model.kernel
    out: dict = {}
    if isinstance(k, Matern52Kernel):
        d = k.to_dict()
        out["kernel.type"] = "matern52"
        out["kernel.variance"] = d["variance"]
        out["kernel.lengthscales"] = d["lengthscales"]
        out["kernel.dims"] = d["dims"]
        out["kernel.train_variance"] = d["train_variance"]
    elif isinstance(k, ProductKernel):
        out["kernel.type"] = "product"
        out["kernel.factors"] = [f.to_dict() for f in k.factors]
    else:
        raise TypeError(f"cannot serialise kernel {type(k).__name__}")
    out["inducing_inputs"] = np.asarray(ad.value(model.inducing_inputs), dtype=float).tolist()
    out["q.mean"] = [float(v) for v in np.asarray(ad.value(model.q.mean), dtype=float)]
    out["q.scale_lower_triangle"] = [float(v) for v in L[rows, cols]]
    out["jitter"] = float(model.jitter)
    out["train_inducing"] = bool(model.train_inducing)
    return out


def model_from_dict(d: dict) -> SvgpModel:
    if d["kernel.type"] == "matern52":
        kernel = kernel_from_dict({
            "type": "matern52", "variance": d["kernel.variance"], "lengthscales": d["kernel.lengthscales"],
            "dims": d["kernel.dims"], "train_variance": d.get("kernel.train_variance", True),
        })
    else:
        kernel = kernel_from_dict({"type": "product", "factors": d["kernel.factors"]})
    Z = np.array(d["inducing_inputs"], dtype=float).reshape(len(d["q.mean"]), -1)
    m = len(d["q.mean"])
    L = np.zeros((m, m))
    L[np.tril_indices(m)] = d["q.scale_lower_triangle"]
    return SvgpModel(kernel, Z, VariationalGaussian(np.array(d["q.mean"], dtype=float), L),
                     jitter=d["jitter"], train_inducing=d.get("train_inducing", True))
