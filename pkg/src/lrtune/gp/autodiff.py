"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op in this module accepts either plain ``numpy`` values or :class:`Node`
objects. When no argument is a ``Node`` the op returns a plain ``ndarray``, so
the same model code serves both the fast prediction path and the gradient
path.

>>> x = Node(np.array(2.0))
>>> y = x * x + exp(x)
>>> grads = backward(y)
>>> float(grads[x])   # 2x + e^x
11.38905609893065
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

__all__ = [
    "Node", "backward", "value_and_grad", "value",
    "add", "sub", "mul", "div", "neg", "square", "exp", "log", "log1p",
    "sqrt", "softplus", "sigmoid", "sum", "mean", "matmul", "transpose",
    "reshape", "expand_dims", "getitem", "take", "concatenate", "stack",
    "cholesky", "solve_triangular", "solve", "diagonal", "clip_min",
    "matern52_sqdist",
]

Array = np.ndarray


class Node:
    """A value on the tape together with the vector-Jacobian products of its parents."""

    # make numpy defer to our reflected operators
    __array_ufunc__ = None
    __slots__ = ("value", "parents")

    def __init__(self, value, parents: Sequence[tuple["Node", Callable]] = ()):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Node({self.value!r})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        return _unary(self, lambda v: v ** p, lambda g, v, out: g * p * v ** (p - 1))

    def __getitem__(self, idx):
        return getitem(self, idx)


def value(x):
    """Strip the tape: return the numeric value of ``x``."""
    return x.value if isinstance(x, Node) else x


def _v(x):
    return x.value if isinstance(x, Node) else x


def _make(out, links):
    links = [(p, f) for p, f in links if isinstance(p, Node)]
    if not links:
        return out
    return Node(out, links)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _unary(x, fwd, bwd):
    v = _v(x)
    out = fwd(v)
    return _make(out, [(x, lambda g: bwd(g, v, out))])


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    va, vb = _v(a), _v(b)
    out = va + vb
    sa, sb = np.shape(va), np.shape(vb)
    return _make(out, [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    va, vb = _v(a), _v(b)
    out = va - vb
    sa, sb = np.shape(va), np.shape(vb)
    return _make(out, [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))])


def mul(a, b):
    va, vb = _v(a), _v(b)
    out = va * vb
    sa, sb = np.shape(va), np.shape(vb)
    return _make(out, [(a, lambda g: _unbroadcast(g * vb, sa)), (b, lambda g: _unbroadcast(g * va, sb))])


def div(a, b):
    va, vb = _v(a), _v(b)
    out = va / vb
    sa, sb = np.shape(va), np.shape(vb)
    return _make(out, [
        (a, lambda g: _unbroadcast(g / vb, sa)),
        (b, lambda g: _unbroadcast(-g * out / vb, sb)),
    ])


def neg(x):
    return _unary(x, np.negative, lambda g, v, out: -g)


def square(x):
    return _unary(x, np.square, lambda g, v, out: 2.0 * g * v)


def exp(x):
    return _unary(x, np.exp, lambda g, v, out: g * out)


def log(x):
    return _unary(x, np.log, lambda g, v, out: g / v)


def log1p(x):
    return _unary(x, np.log1p, lambda g, v, out: g / (1.0 + v))


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, v, out: 0.5 * g / out)


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    return _unary(x, lambda v: np.logaddexp(0.0, v), lambda g, v, out: g * expit(v))


def sigmoid(x):
    return _unary(x, expit, lambda g, v, out: g * out * (1.0 - out))


def clip_min(x, lo: float):
    """max(x, lo) with the gradient masked where the floor is active."""
    return _unary(x, lambda v: np.maximum(v, lo), lambda g, v, out: g * (v > lo))


def matern52_sqdist(d2):
    """Unit-variance Matérn-5/2 profile as a function of the squared scaled distance.

    Differentiating with respect to r² rather than r keeps the derivative finite at
    zero distance.
    """
    v = np.maximum(_v(d2), 0.0)
    r = np.sqrt(v)
    s5r = np.sqrt(5.0) * r
    e = np.exp(-s5r)
    out = (1.0 + s5r + 5.0 / 3.0 * v) * e
    return _make(out, [(d2, lambda g: g * (-5.0 / 6.0) * (1.0 + s5r) * e)])


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    v = _v(x)
    out = np.sum(v, axis=axis, keepdims=keepdims)
    shape = np.shape(v)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(out, [(x, bwd)])


def mean(x, axis=None, keepdims=False):
    v = _v(x)
    n = v.size if axis is None else np.prod([np.shape(v)[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) / float(n)


def transpose(x):
    """Swap the last two axes."""
    return _unary(x, lambda v: np.swapaxes(v, -1, -2), lambda g, v, out: np.swapaxes(g, -1, -2))


def reshape(x, shape):
    return _unary(x, lambda v: np.reshape(v, shape), lambda g, v, out: np.reshape(g, np.shape(v)))


def expand_dims(x, axis):
    return _unary(x, lambda v: np.expand_dims(v, axis), lambda g, v, out: np.reshape(g, np.shape(v)))


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _scatter_rows(shape, indices, g):
    """Sum rows of ``g`` into a zero array of ``shape`` at ``indices`` (axis 0), duplicates allowed."""
    full = np.zeros(shape)
    order = np.argsort(indices, kind="stable")
    uniq, starts = np.unique(indices[order], return_index=True)
    full[uniq] = np.add.reduceat(np.asarray(g)[order], starts, axis=0)
    return full


def getitem(x, idx):
    v = _v(x)
    out = v[idx]
    basic = _basic_index(idx)

    def bwd(g):
        full = np.zeros_like(v)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return full

    return _make(out, [(x, bwd)])


def take(x, indices, axis=0):
    indices = np.asarray(indices, dtype=int)
    v = _v(x)
    out = np.take(v, indices, axis=axis)

    def bwd(g):
        if indices.ndim != 1:
            full = np.zeros_like(v)
            np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
            return full
        moved_shape = (np.shape(v)[axis],) + tuple(np.delete(np.shape(v), axis))
        full = _scatter_rows(moved_shape, indices, np.moveaxis(g, axis, 0))
        return np.moveaxis(full, 0, axis)

    return _make(out, [(x, bwd)])


def concatenate(xs, axis=0):
    vals = [np.asarray(_v(x), dtype=float) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [np.shape(v)[axis] for v in vals])
    links = []
    for i, x in enumerate(xs):
        lo, hi = bounds[i], bounds[i + 1]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(lo, hi)
        links.append((x, lambda g, sl=tuple(sl): g[sl]))
    return _make(out, links)


def stack(xs, axis=0):
    return concatenate([expand_dims(x, axis) for x in xs], axis=axis)


def diagonal(x):
    """Diagonal over the last two axes."""
    v = _v(x)
    out = np.diagonal(v, axis1=-2, axis2=-1).copy()

    def bwd(g):
        full = np.zeros_like(v)
        n = v.shape[-1]
        full[..., np.arange(n), np.arange(n)] = g
        return full

    return _make(out, [(x, bwd)])


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    va, vb = _v(a), _v(b)
    out = va @ vb
    a1, b1 = np.ndim(va) == 1, np.ndim(vb) == 1

    def ga(g):
        g2 = np.asarray(g)
        A = va[None, :] if a1 else va
        B = vb[:, None] if b1 else vb
        if b1:
            g2 = g2[..., None]
        if a1:
            g2 = g2[..., None, :]
        r = g2 @ np.swapaxes(B, -1, -2)
        r = _unbroadcast(r, A.shape)
        return r[0] if a1 else r

    def gb(g):
        g2 = np.asarray(g)
        A = va[None, :] if a1 else va
        B = vb[:, None] if b1 else vb
        if b1:
            g2 = g2[..., None]
        if a1:
            g2 = g2[..., None, :]
        r = np.swapaxes(A, -1, -2) @ g2
        r = _unbroadcast(r, B.shape)
        return r[:, 0] if b1 else r

    return _make(out, [(a, ga), (b, gb)])


def _phi(X):
    out = np.tril(X)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(A, jitter: float = 0.0):
    """Lower Cholesky factor of the symmetric matrix ``A`` (plus escalating jitter).

    The vector-Jacobian product returns a symmetric cotangent, which is the
    correct total derivative for matrices built symmetrically upstream.
    """
    from .linalg import robust_cholesky

    vA = _v(A)
    L, _ = robust_cholesky(vA, jitter)

    def bwd(g):
        P = _phi(L.T @ g)
        P = 0.5 * (P + P.T)
        tmp = scipy.linalg.solve_triangular(L, P, lower=True, trans="T")
        return scipy.linalg.solve_triangular(L, tmp.T, lower=True, trans="T").T

    return _make(L, [(A, bwd)])


def solve_triangular(L, B, lower: bool = True):
    """Solve L X = B for a single (unbatched) triangular ``L``."""
    vL, vB = _v(L), _v(B)
    X = scipy.linalg.solve_triangular(vL, vB, lower=lower)

    def gB(g):
        return scipy.linalg.solve_triangular(vL, g, lower=lower, trans="T")

    def gL(g):
        bb = gB(g)
        outer = -np.outer(bb, X) if np.ndim(X) == 1 else -bb @ X.T
        return np.tril(outer) if lower else np.triu(outer)

    return _make(X, [(L, gL), (B, gB)])


def solve(A, B):
    """General (batched) solve A X = B; B must carry a trailing column axis."""
    vA, vB = _v(A), _v(B)
    X = np.linalg.solve(vA, vB)

    def gB(g):
        return _unbroadcast(np.linalg.solve(np.swapaxes(vA, -1, -2), g), np.shape(vB))

    def gA(g):
        bb = np.linalg.solve(np.swapaxes(vA, -1, -2), g)
        return _unbroadcast(-bb @ np.swapaxes(X, -1, -2), np.shape(vA))

    return _make(X, [(A, gA), (B, gB)])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Node):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order[::-1]


def backward(out: Node, seed=None) -> dict:
    """Accumulate d(out)/d(node) for every node reachable from ``out``.

    Returns a mapping keyed by node (identity hashing).
    """
    grads = {id(out): np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=float)}
    nodes = {}
    for node in _toposort(out):
        nodes[id(node)] = node
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return _GradMap(grads, nodes)


class _GradMap(dict):
    def __init__(self, grads, nodes):
        super().__init__()
        self._grads = grads
        self._nodes = nodes

    def __getitem__(self, node):
        g = self._grads.get(id(node))
        return np.zeros_like(node.value) if g is None else g

    def get(self, node, default=None):
        return self._grads.get(id(node), default)


def value_and_grad(fn: Callable[[dict], Node], params: dict) -> tuple[float, dict]:
    """Evaluate ``fn`` on leaf nodes built from ``params`` and return (value, grads)."""
    leaves = {k: Node(np.array(v, dtype=float)) for k, v in params.items()}
    out = fn(leaves)
    if not isinstance(out, Node):
        return float(out), {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}
    grads = backward(out)
    return float(out.value), {k: np.array(grads[leaf]) for k, leaf in leaves.items()}
