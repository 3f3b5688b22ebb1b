"""Multi-index bookkeeping, normalized Hermite polynomials and symmetric tensors.

Conventions
-----------
* ``he_k = H_k / sqrt(k!)`` with ``H_k`` the probabilists' Hermite polynomials.
* Degree-``q`` multi-indices over ``d`` variables are enumerated in graded
  reverse-lexicographic order.
* A symmetric order-``k`` tensor ``T`` is stored as a flat vector indexed by
  multi-indices, with coefficient ``sqrt(k!/beta!) * T[i(beta)]``.  With this
  weighting the flat dot product equals the full Frobenius contraction and
  ``<F[T], F[He_k(x)]> = <T, He_k(x)>``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

DENSE_LIMIT = 10**6


class DeskScaleError(ValueError):
    """Configuration is beyond what the library computes at desk scale."""


def basis_size(d: int, q: int) -> int:
    """Number of multi-indices of degree ``q`` over ``d`` variables."""
    if d < 1 or q < 0:
        raise ValueError(f"need d >= 1 and q >= 0, got d={d}, q={q}")
    size = math.comb(d + q - 1, q)
    if size > np.iinfo(np.int64).max:
        raise DeskScaleError(f"B({d},{q}) overflows a 64-bit count")
    return size


@dataclass(frozen=True, eq=False)
class MultiIndexBasis:
    d: int
    q: int
    indices: np.ndarray = field(repr=False)  # (D, d) exponents, uint8
    # (D, q) variable / power pairs of the nonzero exponents, padded with power 0
    factor_vars: np.ndarray = field(repr=False)
    factor_pows: np.ndarray = field(repr=False)
    _lookup: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    def position(self, beta) -> int:
        if not self._lookup:
            self._lookup.update({r: i for i, r in enumerate(map(tuple, self.indices.tolist()))})
        return self._lookup[tuple(int(b) for b in beta)]

    def factorial_weights(self) -> np.ndarray:
        """``sqrt(q!/beta!)`` for every multi-index, in basis order."""
        return _factorial_weights(self.d, self.q)

    def __eq__(self, other):
        return isinstance(other, MultiIndexBasis) and (self.d, self.q) == (other.d, other.q)

    def __hash__(self):
        return hash((self.d, self.q))


@lru_cache(maxsize=64)
def multi_index_basis(d: int, q: int) -> MultiIndexBasis:
    """Ordered basis of multi-indices ``beta`` with ``|beta| = q`` (cached)."""
    size = basis_size(d, q)
    if q > 255 or size * d > 2 * 10**9:
        raise DeskScaleError(f"basis B({d},{q}) = {size} too large to enumerate")
    idx = np.zeros((size, d), dtype=np.uint8)
    rows = np.arange(size)
    if q:
        combos = np.array(list(itertools.combinations_with_replacement(range(d), q)), dtype=np.int64)
        for t in range(q):
            np.add.at(idx, (rows, combos[:, t]), 1)
    # grevlex within a single degree == ascending lex order of the reversed tuple
    order = np.lexsort(idx.T)  # last key (column d-1) is primary
    idx = idx[order]
    width = max(q, 1)
    fv = np.zeros((size, width), dtype=np.int64)
    fp = np.zeros((size, width), dtype=np.int64)
    if q:
        r, c = np.nonzero(idx)
        slot = np.zeros(size, dtype=np.int64)
        for rr, cc in zip(r.tolist(), c.tolist()):
            fv[rr, slot[rr]] = cc
            fp[rr, slot[rr]] = idx[rr, cc]
            slot[rr] += 1
    for a in (idx, fv, fp):
        a.setflags(write=False)
    return MultiIndexBasis(d, q, idx, fv, fp)


@lru_cache(maxsize=64)
def _factorial_weights(d: int, q: int) -> np.ndarray:
    basis = multi_index_basis(d, q)
    logw = math.lgamma(q + 1) - np.sum(gammaln(basis.factor_pows + 1.0), axis=1)
    w = np.sqrt(np.exp(logw))
    w.setflags(write=False)
    return w


def hermite_table(x, kmax: int) -> np.ndarray:
    """Stack ``[he_0(x), ..., he_kmax(x)]`` along a new trailing axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (kmax + 1,))
    out[..., 0] = 1.0
    if kmax >= 1:
        out[..., 1] = x
    # unnormalized recurrence H_{k+1} = x H_k - k H_{k-1}
    for k in range(1, kmax):
        out[..., k + 1] = x * out[..., k] - k * out[..., k - 1]
    for k in range(2, kmax + 1):
        out[..., k] /= math.sqrt(math.factorial(k))
    return out


def scalar_hermite(k: int, x):
    """Normalized probabilists' Hermite polynomial ``he_k(x)``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    val = hermite_table(x, k)[..., k]
    return float(val) if np.ndim(val) == 0 else val


def hermite_features(x: np.ndarray, basis: MultiIndexBasis) -> np.ndarray:
    """Flattened degree-``q`` Hermite features for a batch ``x`` of shape (n, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != basis.d:
        raise ValueError(f"input dimension {x.shape[1]} != basis dimension {basis.d}")
    if basis.q == 0:
        return np.ones((x.shape[0], 1))
    # 2-D take on the flattened table is several times faster than 3-D fancy indexing.
    table = hermite_table(x, basis.q).reshape(x.shape[0], -1)
    cols = basis.factor_vars * (basis.q + 1) + basis.factor_pows
    out = np.take(table, cols[:, 0], axis=1)
    for t in range(1, cols.shape[1]):
        out *= np.take(table, cols[:, t], axis=1)
    return out


def hermite_feature_vector(x, basis: MultiIndexBasis) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != basis.d:
        raise ValueError(f"expected a vector of length {basis.d}, got shape {x.shape}")
    return hermite_features(x[None, :], basis)[0]


def _quadratic_forms(coeffs: np.ndarray, basis: MultiIndexBasis) -> np.ndarray:
    # (k, d, d) matrices M with <c, F(x)> = (x^T M x - tr M) for q == 2
    d, k = basis.d, coeffs.shape[1]
    m = np.zeros((k, d, d))
    i, j = basis.factor_vars[:, 0], basis.factor_vars[:, 1]
    diag = basis.factor_pows[:, 0] == 2
    m[:, i[diag], i[diag]] = coeffs[diag].T / math.sqrt(2.0)
    off = ~diag
    m[:, i[off], j[off]] = coeffs[off].T / 2.0
    m[:, j[off], i[off]] = coeffs[off].T / 2.0
    return m


def project_features(x: np.ndarray, coeffs, basis: MultiIndexBasis, chunk: int = 8192) -> np.ndarray:
    """``hermite_features(x, basis) @ coeffs`` without forming the features when q == 2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    coeffs = np.asarray(coeffs, dtype=float)
    flat = coeffs.ndim == 1
    coeffs = coeffs.reshape(coeffs.shape[0], -1)
    if x.shape[1] != basis.d or coeffs.shape[0] != basis.size:
        raise ValueError("dimension mismatch between inputs, coefficients and basis")
    out = np.empty((x.shape[0], coeffs.shape[1]))
    if basis.q == 2:
        m = _quadratic_forms(coeffs, basis)
        k, d = m.shape[0], basis.d
        stacked = m.transpose(1, 0, 2).reshape(d, k * d)
        trace = np.trace(m, axis1=1, axis2=2)
        for lo in range(0, x.shape[0], chunk):
            xb = x[lo : lo + chunk]
            xm = (xb @ stacked).reshape(xb.shape[0], k, d)
            out[lo : lo + chunk] = np.einsum("nkd,nd->nk", xm, xb) - trace
    else:
        for lo in range(0, x.shape[0], chunk):
            out[lo : lo + chunk] = hermite_features(x[lo : lo + chunk], basis) @ coeffs
    return out[:, 0] if flat else out


def he2_matrix(v) -> np.ndarray:
    """Matrix Hermite polynomial ``(v v^T - I) / sqrt(2)``."""
    v = np.asarray(v, dtype=float).ravel()
    return (np.outer(v, v) - np.eye(v.size)) / math.sqrt(2.0)


# --------------------------------------------------------------------------
# symmetric tensors


@dataclass(frozen=True)
class SymTensor:
    dim: int
    order: int
    data: np.ndarray  # flattened, Frobenius-preserving weights

    def __post_init__(self):
        expected = basis_size(self.dim, self.order)
        if np.shape(self.data) != (expected,):
            raise ValueError(f"data must have shape ({expected},), got {np.shape(self.data)}")

    @property
    def basis(self) -> MultiIndexBasis:
        return multi_index_basis(self.dim, self.order)

    def inner(self, other: "SymTensor") -> float:
        if (self.dim, self.order) != (other.dim, other.order):
            raise ValueError("inner product needs tensors of equal dim and order")
        return float(self.data @ other.data)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def entries(self) -> np.ndarray:
        """Value of one dense entry per multi-index (the unweighted coefficient)."""
        return self.data / self.basis.factorial_weights()

    @classmethod
    def from_entries(cls, dim: int, order: int, entries) -> "SymTensor":
        w = multi_index_basis(dim, order).factorial_weights()
        return cls(dim, order, np.asarray(entries, dtype=float) * w)

    @classmethod
    def from_dense(cls, tensor: np.ndarray) -> "SymTensor":
        """Flatten a dense tensor (symmetrized first)."""
        tensor = np.asarray(tensor, dtype=float)
        k, d = tensor.ndim, (tensor.shape[0] if tensor.ndim else 1)
        if k == 0:
            return cls(d, 0, tensor.reshape(1))
        sym = symmetrize_dense(tensor)
        basis = multi_index_basis(d, k)
        entries = np.array([sym[_tuple_of(beta)] for beta in basis.indices])
        return cls.from_entries(d, k, entries)

    def to_dense(self) -> np.ndarray:
        d, k = self.dim, self.order
        if d**k > DENSE_LIMIT:
            raise DeskScaleError(f"dense materialization limited to d^k <= {DENSE_LIMIT}")
        if k == 0:
            return np.asarray(self.data[0])
        return self.entries()[_dense_positions(d, k)].reshape((d,) * k)


@lru_cache(maxsize=16)
def _dense_positions(d: int, k: int) -> np.ndarray:
    # basis position of every dense index tuple, in C order
    basis = multi_index_basis(d, k)
    grid = np.indices((d,) * k).reshape(k, -1)
    counts = np.zeros((grid.shape[1], d), dtype=np.int64)
    for axis in range(k):
        np.add.at(counts, (np.arange(grid.shape[1]), grid[axis]), 1)
    pos = np.array([basis.position(row) for row in counts.tolist()])
    pos.setflags(write=False)
    return pos


def _tuple_of(beta) -> tuple:
    return tuple(i for i, b in enumerate(beta) for _ in range(int(b)))


def symmetrize_dense(tensor: np.ndarray) -> np.ndarray:
    k = tensor.ndim
    if k <= 1:
        return np.array(tensor, dtype=float)
    perms = list(itertools.permutations(range(k)))
    return sum(np.transpose(tensor, p) for p in perms) / len(perms)


def sym_outer(u, v) -> SymTensor:
    """``u ⊙ v`` for vectors, as an order-2 SymTensor."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return SymTensor.from_dense((np.outer(u, v) + np.outer(v, u)) / 2)


def _submultisets(gamma: tuple, size: int):
    """All exponent vectors alpha <= gamma (componentwise) with |alpha| = size."""
    support = [i for i, g in enumerate(gamma) if g]
    ranges = [range(gamma[i] + 1) for i in support]
    for choice in itertools.product(*ranges):
        if sum(choice) == size:
            alpha = [0] * len(gamma)
            for i, c in zip(support, choice):
                alpha[i] = c
            yield tuple(alpha)


def contract(a: SymTensor, b: SymTensor, s: int) -> SymTensor:
    """Symmetrized ``s``-fold contraction of two symmetric tensors.

    Works directly on multi-indices: the contracted indices are summed over
    multisets ``mu`` (weight ``s!/mu!``) and the output is symmetrized by
    averaging over the ways an output multiset splits between the free
    indices of ``a`` and ``b``, rather than over all index permutations.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    k, l = a.order, b.order
    if not 0 <= s <= min(k, l):
        raise ValueError(f"contraction depth {s} outside [0, {min(k, l)}]")
    d = a.dim
    out_order = k + l - 2 * s
    ea = dict(zip(map(tuple, a.basis.indices.tolist()), a.entries()))
    eb = dict(zip(map(tuple, b.basis.indices.tolist()), b.entries()))
    mus = [tuple(m) for m in multi_index_basis(d, s).indices.tolist()]
    mu_weight = [math.factorial(s) / _mfact(m) for m in mus]

    def pair(alpha, beta):
        total = 0.0
        for m, w in zip(mus, mu_weight):
            total += w * ea[_add(alpha, m)] * eb[_add(beta, m)]
        return total

    out_basis = multi_index_basis(d, out_order)
    const = math.factorial(k - s) * math.factorial(l - s) / math.factorial(out_order)
    entries = np.empty(out_basis.size)
    for row, gamma in enumerate(map(tuple, out_basis.indices.tolist())):
        gfact = _mfact(gamma)
        acc = 0.0
        for alpha in _submultisets(gamma, k - s):
            beta = tuple(g - x for g, x in zip(gamma, alpha))
            acc += gfact / (_mfact(alpha) * _mfact(beta)) * pair(alpha, beta)
        entries[row] = const * acc
    return SymTensor.from_entries(d, out_order, entries)


def _add(x: tuple, y: tuple) -> tuple:
    return tuple(i + j for i, j in zip(x, y))


def _mfact(beta) -> int:
    return math.prod(math.factorial(int(b)) for b in beta)


@lru_cache(maxsize=16)
def _gauss_rule(nodes: int):
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return x, w / math.sqrt(2.0 * math.pi)


def gauss_expectation(f, nodes: int = 64) -> float:
    """``E[f(Z)]`` for ``Z ~ N(0, 1)`` by Gauss-Hermite quadrature."""
    x, w = _gauss_rule(nodes)
    return float(w @ f(x))
