"""Learning-rate schedule tuning with Gaussian-process models of optimisation traces."""

__version__ = "0.1.0"
