"""Inducing-input initialisation."""
from __future__ import annotations

import numpy as np
from scipy.cluster.vq import kmeans2


def init_inducing(X: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``m`` inducing inputs by k-means++ over the rows of X.

    With at most ``m`` distinct rows the distinct rows themselves are returned.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    uniq = np.unique(X, axis=0)
    if len(uniq) <= m:
        return uniq.copy()
    seed = int(rng.integers(2**31 - 1))
    centroids, _ = kmeans2(uniq, m, minit="++", seed=seed)
    centroids = np.unique(centroids, axis=0)
    if len(centroids) < m:
        # empty clusters collapse; top up with data rows not already chosen
        extra = uniq[rng.choice(len(uniq), size=m - len(centroids), replace=False)]
        centroids = np.unique(np.vstack([centroids, extra]), axis=0)
    return centroids
