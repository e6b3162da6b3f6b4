"""Matérn-5/2 (ARD) and product kernels.

Kernel fields may hold plain arrays or tape :class:`~lrtune.gp.autodiff.Node`
values; ``with_parameters`` builds such a traced copy from unconstrained
parameters, which is how gradients reach kernel hyperparameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad


def softplus(u):
    """Numerically stable log(1 + e^u) for scalars or arrays."""
    out = np.logaddexp(0.0, u)
    return float(out) if np.ndim(out) == 0 else out


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs strictly positive values")
    # y + log(1 - e^-y), written to stay accurate for tiny and large y
    return np.array(y + np.log(-np.expm1(-y)))


def _sqdist(A, B):
    """Squared Euclidean distance between rows, batched over leading axes."""
    a2 = ad.sum(ad.square(A), axis=-1)
    b2 = ad.sum(ad.square(B), axis=-1)
    cross = ad.matmul(A, ad.transpose(B))
    d2 = ad.expand_dims(a2, -1) + ad.expand_dims(b2, -2) - 2.0 * cross
    return ad.clip_min(d2, 0.0)


@dataclass
class Matern52Kernel:
    """Stationary Matérn-5/2 kernel with one lengthscale per active input dimension.

    ``dims`` selects the slice of the input vector this kernel sees (all of it
    when ``None``).
    """

    variance: object = 1.0
    lengthscales: object = field(default_factory=lambda: np.ones(1))
    dims: tuple[int, ...] | None = None
    train_variance: bool = True

    def __post_init__(self):
        if not isinstance(self.variance, ad.Node):
            self.variance = float(self.variance)
            if self.variance <= 0:
                raise ValueError("kernel variance must be positive")
        if not isinstance(self.lengthscales, ad.Node):
            self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
            if np.any(self.lengthscales <= 0):
                raise ValueError("lengthscales must be positive")
        if self.dims is not None:
            self.dims = tuple(int(d) for d in self.dims)
            if len(self.dims) != np.size(ad.value(self.lengthscales)):
                raise ValueError("one lengthscale per active dimension required")

    @property
    def input_dim(self) -> int:
        return int(np.size(ad.value(self.lengthscales)))

    def _slice(self, X):
        if self.dims is None:
            return X
        return ad.take(X, list(self.dims), axis=-1)

    def _check(self, X):
        n = np.shape(ad.value(X))[-1]
        need = self.input_dim if self.dims is None else max(self.dims) + 1
        if (self.dims is None and n != need) or n < need:
            raise ValueError(f"input dimension {n} does not match kernel dimension {need}")

    def __call__(self, A, B=None):
        """Gram matrix between the rows of ``A`` and ``B`` (batched over leading axes)."""
        B = A if B is None else B
        self._check(A)
        self._check(B)
        ls = self.lengthscales
        d2 = _sqdist(self._slice(A) / ls, self._slice(B) / ls)
        return self.variance * ad.matern52_sqdist(d2)

    def diag(self, A):
        n = np.shape(ad.value(A))[:-1]
        return self.variance * np.ones(n)

    def eval(self, a, b) -> float:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        return float(ad.value(self(a[None, :], b[None, :]))[0, 0])

    @property
    def prior_variance(self):
        return self.variance

    def parameters(self, prefix: str = "kernel") -> dict[str, np.ndarray]:
        out = {f"{prefix}.lengthscales": inv_softplus(ad.value(self.lengthscales))}
        if self.train_variance:
            out[f"{prefix}.variance"] = inv_softplus(np.array(ad.value(self.variance)))
        return out

    def with_parameters(self, theta: dict, prefix: str = "kernel") -> "Matern52Kernel":
        new = replace(self)
        key = f"{prefix}.lengthscales"
        if key in theta:
            new.lengthscales = ad.softplus(theta[key])
        key = f"{prefix}.variance"
        if key in theta:
            new.variance = ad.softplus(theta[key])
        return new

    def to_dict(self) -> dict:
        return {
            "type": "matern52",
            "variance": float(ad.value(self.variance)),
            "lengthscales": [float(v) for v in ad.value(self.lengthscales)],
            "dims": None if self.dims is None else list(self.dims),
            "train_variance": self.train_variance,
        }


@dataclass
class ProductKernel:
    """k(a, b) = prod_i k_i(a[dims_i], b[dims_i]) over disjoint input slices."""

    factors: Sequence[Matern52Kernel]

    def __post_init__(self):
        self.factors = list(self.factors)
        seen: set[int] = set()
        for f in self.factors:
            if f.dims is None:
                raise ValueError("product-kernel factors need explicit dims")
            if seen & set(f.dims):
                raise ValueError("product-kernel factors must act on disjoint dims")
            seen |= set(f.dims)

    @property
    def input_dim(self) -> int:
        return max(max(f.dims) for f in self.factors) + 1

    def __call__(self, A, B=None):
        B = A if B is None else B
        for X in (A, B):
            if np.shape(ad.value(X))[-1] != self.input_dim:
                raise ValueError(
                    f"input dimension {np.shape(ad.value(X))[-1]} does not match kernel dimension {self.input_dim}"
                )
        K = self.factors[0](A, B)
        for f in self.factors[1:]:
            K = K * f(A, B)
        return K

    @property
    def prior_variance(self):
        v = self.factors[0].variance
        for f in self.factors[1:]:
            v = v * f.variance
        return v

    def diag(self, A):
        n = np.shape(ad.value(A))[:-1]
        return self.prior_variance * np.ones(n)

    def eval(self, a, b) -> float:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if a.shape != b.shape:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        return float(ad.value(self(a[None, :], b[None, :]))[0, 0])

    def parameters(self, prefix: str = "kernel") -> dict[str, np.ndarray]:
        out = {}
        for i, f in enumerate(self.factors):
            out.update(f.parameters(f"{prefix}.factors.{i}"))
        return out

    def with_parameters(self, theta: dict, prefix: str = "kernel") -> "ProductKernel":
        return ProductKernel([f.with_parameters(theta, f"{prefix}.factors.{i}") for i, f in enumerate(self.factors)])

    def to_dict(self) -> dict:
        return {"type": "product", "factors": [f.to_dict() for f in self.factors]}


def kernel_eval(k, a, b) -> float:
    """Covariance between two single inputs."""
    return k.eval(a, b)


def gram(k, A, B=None) -> np.ndarray:
    """Dense Gram matrix with element (i, j) = k(A_i, B_j)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = A if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    return np.asarray(ad.value(k(A, B)))


def kernel_from_dict(d: dict):
    if d["type"] == "matern52":
        return Matern52Kernel(
            variance=d["variance"],
            lengthscales=np.array(d["lengthscales"], dtype=float),
            dims=None if d["dims"] is None else tuple(d["dims"]),
            train_variance=d.get("train_variance", True),
        )
    if d["type"] == "product":
        return ProductKernel([kernel_from_dict(f) for f in d["factors"]])
    raise ValueError(f"unknown kernel type {d['type']!r}")
