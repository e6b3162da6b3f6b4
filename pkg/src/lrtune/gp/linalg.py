"""Dense linear-algebra helpers with bounded jitter escalation."""
from __future__ import annotations

import numpy as np
import scipy.linalg

#: escalation steps after the base jitter (x10 each)
MAX_ESCALATIONS = 3
BASE_RELATIVE_JITTER = 1e-6


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after the bounded jitter escalation."""


def robust_cholesky(M: np.ndarray, jitter: float = 0.0) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``M + jitter * I``, escalating the jitter on failure.

    The first attempt uses ``jitter`` as given. On failure the jitter restarts at
    ``1e-6 * mean(diag(M))`` and grows by x10 at most three times.

    Returns
    -------
    (L, used_jitter)
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    n = M.shape[0]
    if n == 0:
        return np.zeros((0, 0)), jitter
    eye = np.eye(n)
    base = BASE_RELATIVE_JITTER * max(float(np.mean(np.diag(M))), np.finfo(float).tiny)
    attempts = [jitter] + [base * 10.0 ** i for i in range(MAX_ESCALATIONS + 1) if base * 10.0 ** i > jitter]
    for jit in attempts:
        try:
            L = np.linalg.cholesky(M + jit * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jit
    raise NotPositiveDefinite(
        f"matrix of size {n} not positive definite after jitter escalation up to {attempts[-1]:.3g}"
    )


def cholesky(M: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower-triangular L with L L^T = M + jitter I (see :func:`robust_cholesky`)."""
    return robust_cholesky(M, jitter)[0]


def solve_lower(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return scipy.linalg.solve_triangular(L, B, lower=True)


def solve_upper_from_lower(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve L^T X = B."""
    return scipy.linalg.solve_triangular(L, B, lower=True, trans="T")


def cho_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return solve_upper_from_lower(L, solve_lower(L, B))
