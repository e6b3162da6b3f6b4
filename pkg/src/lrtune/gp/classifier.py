"""SVGP classifier with a Bernoulli (logistic) likelihood.

Used to predict which (trace value, learning rate) pairs produce failed runs.
Expectations over q(f) use Gauss-Hermite quadrature, which makes both the
training objective and the predicted probabilities deterministic.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .kernels import Matern52Kernel
from .optim import AdamConfig, differentiable, fit_parameters
from .svgp import SvgpModel, gauss_hermite, kl_to_prior
from .inducing import init_inducing

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    num_inducing: int = 20
    adam: AdamConfig = field(default_factory=lambda: AdamConfig(steps=400, learning_rate=0.05))
    quadrature_points: int = 20
    lengthscale: float = 0.3
    variance: float = 4.0
    seed: int = 0


@dataclass
class BernoulliSvgp:
    """Fitted classifier; ``constant_prob`` is set when training data had a single class."""

    model: SvgpModel | None
    lower: np.ndarray
    span: np.ndarray
    quadrature_points: int = 20
    constant_prob: float | None = None
    single_class_warning: bool = False

    def _normalise(self, X):
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.lower) / self.span

    def prob(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.constant_prob is not None:
            return np.full(len(X), self.constant_prob)
        mean, var = self.model.projection().marginals(self._normalise(X))
        return _expected_sigmoid(ad.value(mean), ad.value(var), self.quadrature_points)


def _expected_sigmoid(mean, var, n_quad):
    z, w = gauss_hermite(n_quad)
    f = np.asarray(mean)[..., None] + np.sqrt(np.asarray(var))[..., None] * z
    p = expit(f) @ w
    # keep strictly inside (0, 1)
    tiny = np.finfo(float).eps
    return np.clip(p, tiny, 1.0 - tiny)


def bernoulli_elbo(model: SvgpModel, X, labels, n_quad: int = 20):
    """Sum of E_q[log p(label | f)] over the data minus KL (tape-aware)."""
    z, w = gauss_hermite(n_quad)
    sign = 2.0 * np.asarray(labels, dtype=float) - 1.0
    mean, var = model.projection().marginals(X)
    f = ad.expand_dims(mean, -1) + ad.expand_dims(ad.sqrt(ad.clip_min(var, 1e-12)), -1) * z
    loglik = -ad.softplus(-(sign[:, None] * f))
    return ad.sum(ad.matmul(loglik, w)) - kl_to_prior(model)


def classifier_fit(X, labels, config: ClassifierConfig | None = None) -> BernoulliSvgp:
    """Fit a Bernoulli-likelihood SVGP by maximising its ELBO with Adam."""
    cfg = config or ClassifierConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if len(X) != len(labels):
        raise ValueError("X and labels must have the same length")
    lower = X.min(axis=0) if len(X) else np.zeros(X.shape[1])
    span = (X.max(axis=0) - lower) if len(X) else np.ones(X.shape[1])
    span = np.where(span > 0, span, 1.0)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        p = (n_pos + 0.5) / (len(labels) + 1.0)
        log.warning("classifier trained on a single class; returning constant probability %.3g", p)
        return BernoulliSvgp(None, lower, span, cfg.quadrature_points, constant_prob=p, single_class_warning=True)

    Xn = (X - lower) / span
    rng = np.random.default_rng(cfg.seed)
    Z = init_inducing(Xn, cfg.num_inducing, rng)
    kernel = Matern52Kernel(cfg.variance, np.full(X.shape[1], cfg.lengthscale))
    model = SvgpModel.from_prior(kernel, Z)
    theta0 = model.parameters()

    def neg_elbo(theta):
        return -bernoulli_elbo(model.with_parameters(theta), Xn, labels, cfg.quadrature_points)

    res = fit_parameters(differentiable(neg_elbo), theta0, cfg.adam)
    fitted = model.with_parameters(res.params).concrete()
    return BernoulliSvgp(fitted, lower, span, cfg.quadrature_points)


def classifier_prob(classifier: BernoulliSvgp, x) -> np.ndarray | float:
    """E_q[logistic(f(x))]; scalar for a single input vector."""
    x = np.asarray(x, dtype=float)
    p = classifier.prob(x)
    return float(p[0]) if x.ndim <= 1 else p


def prior_classifier(input_dim: int, Z, kernel=None) -> BernoulliSvgp:
    """Untrained classifier with zero-mean prior q(u); predicts 0.5 everywhere."""
    kernel = kernel or Matern52Kernel(1.0, np.ones(input_dim))
    model = SvgpModel.from_prior(kernel, np.asarray(Z, dtype=float))
    return BernoulliSvgp(model, np.zeros(input_dim), np.ones(input_dim))
