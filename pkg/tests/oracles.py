"""Reference implementations used as test oracles (dense, slow, obviously correct)."""
import numpy as np

from lrtune.gp import autodiff as ad
from lrtune.gp.kernels import Matern52Kernel, ProductKernel
from lrtune.gp.svgp import SvgpModel, VariationalGaussian


def matern52(r):
    s5 = np.sqrt(5.0) * r
    return (1.0 + s5 + 5.0 * r * r / 3.0) * np.exp(-s5)


def naive_gram(kernel, A, B):
    """Element-by-element Gram matrix straight from the kernel formula."""
    out = np.empty((len(A), len(B)))
    factors = kernel.factors if isinstance(kernel, ProductKernel) else [kernel]
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            v = 1.0
            for f in factors:
                dims = list(f.dims) if f.dims is not None else list(range(len(a)))
                ls = np.asarray(ad.value(f.lengthscales))
                r = np.sqrt(np.sum(((a[dims] - b[dims]) / ls) ** 2))
                v *= float(ad.value(f.variance)) * matern52(r)
            out[i, j] = v
    return out


def naive_posterior(model: SvgpModel, X):
    """q(f(X)) via explicit inverses: mean = Kxz K^-1 m, cov = Kxx - Kxz K^-1 (K - S) K^-1 Kzx."""
    Z = np.asarray(ad.value(model.inducing_inputs))
    K = naive_gram(model.kernel, Z, Z)
    K = K + model.jitter * np.mean(np.diag(K)) * np.eye(len(Z))
    Kinv = np.linalg.inv(K)
    Kxz = naive_gram(model.kernel, X, Z)
    S = model.q.cov
    m = np.asarray(ad.value(model.q.mean))
    mean = Kxz @ Kinv @ m
    cov = naive_gram(model.kernel, X, X) - Kxz @ Kinv @ (K - S) @ Kinv @ Kxz.T
    return mean, cov


def naive_kl(model: SvgpModel):
    Z = np.asarray(ad.value(model.inducing_inputs))
    K = naive_gram(model.kernel, Z, Z)
    K = K + model.jitter * np.mean(np.diag(K)) * np.eye(len(Z))
    S = model.q.cov
    m = np.asarray(ad.value(model.q.mean))
    Kinv = np.linalg.inv(K)
    return 0.5 * (np.trace(Kinv @ S) + m @ Kinv @ m - len(m) + np.linalg.slogdet(K)[1] - np.linalg.slogdet(S)[1])


def random_svgp(rng, dim=2, m=6, product=False):
    if product:
        kernel = ProductKernel([
            Matern52Kernel(rng.uniform(0.5, 2.0), rng.uniform(0.3, 1.5, 1), dims=(0,)),
            Matern52Kernel(1.0, rng.uniform(0.3, 1.5, dim - 1), dims=tuple(range(1, dim)), train_variance=False),
        ])
    else:
        kernel = Matern52Kernel(rng.uniform(0.5, 2.0), rng.uniform(0.3, 1.5, dim))
    Z = rng.uniform(-1, 1, (m, dim))
    A = rng.standard_normal((m, m)) * 0.3
    L = np.linalg.cholesky(A @ A.T + 0.1 * np.eye(m))
    return SvgpModel(kernel, Z, VariationalGaussian(rng.standard_normal(m), L))


def central_difference(f, theta: dict, h: float = 1e-5) -> dict:
    out = {}
    for k, v in theta.items():
        v = np.array(v, dtype=float)
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            up, dn = {**theta}, {**theta}
            vu, vd = v.copy(), v.copy()
            vu[idx] += h
            vd[idx] -= h
            up[k], dn[k] = vu, vd
            g[idx] = (f(up) - f(dn)) / (2 * h)
        out[k] = g
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))
