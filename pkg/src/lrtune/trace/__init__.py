from .dataset import TrainingSet, YNormalizer, build_training_set
from .links import LinkFunction, link_eval, softplus
from .model import (InitialValueModel, InsufficientData, TraceModel, TrainConfig, elbo, evaluate_elbo, fit,
                    fit_initial, trace_model_from_dict, trace_model_to_dict)
from .sampling import LatentConditioner, Rollout, empirical_quantile, predict_quantile, sample_trajectories
from .schedule import MalformedTrace, Schedule, Trace, denormalize_lr, normalize_lr

__all__ = [
    "InitialValueModel", "InsufficientData", "LatentConditioner", "LinkFunction", "MalformedTrace", "Rollout",
    "Schedule", "Trace", "TraceModel", "TrainConfig", "TrainingSet", "YNormalizer", "build_training_set",
    "denormalize_lr", "elbo", "empirical_quantile", "evaluate_elbo", "fit", "fit_initial", "link_eval",
    "normalize_lr", "predict_quantile", "sample_trajectories", "softplus", "trace_model_from_dict",
    "trace_model_to_dict",
]
