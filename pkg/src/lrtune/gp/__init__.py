"""Self-contained Gaussian-process engine."""
from .classifier import BernoulliSvgp, ClassifierConfig, classifier_fit, classifier_prob
from .inducing import init_inducing
from .kernels import Matern52Kernel, ProductKernel, gram, kernel_eval, softplus
from .linalg import NotPositiveDefinite, cholesky, robust_cholesky
from .optim import AdamConfig, FitAborted, FitResult, GradientRecord, differentiable, fit_parameters
from .svgp import (
    ConditionedPosterior,
    SvgpModel,
    VariationalGaussian,
    condition_on_values,
    expected_log_gaussian,
    gauss_hermite,
    kl_to_prior,
    model_from_dict,
    model_to_dict,
    posterior,
    sample_posterior,
    variance_clips,
)

__all__ = [
    "AdamConfig", "BernoulliSvgp", "ClassifierConfig", "ConditionedPosterior", "FitAborted", "FitResult",
    "GradientRecord", "Matern52Kernel", "NotPositiveDefinite", "ProductKernel", "SvgpModel",
    "VariationalGaussian", "cholesky", "classifier_fit", "classifier_prob", "condition_on_values",
    "differentiable", "expected_log_gaussian", "fit_parameters", "gauss_hermite", "gram", "init_inducing",
    "kernel_eval", "kl_to_prior", "model_from_dict", "model_to_dict", "posterior", "robust_cholesky",
    "sample_posterior", "softplus", "variance_clips",
]
