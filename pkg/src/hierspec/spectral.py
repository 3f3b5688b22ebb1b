"""Layer-wise spectral learner: moment matrix, top eigenspace, second layer, ridge readout.

He_2 keeps its 1/sqrt(2) everywhere, so eigenvalues of the moment matrix carry
that factor; eigenvectors and all overlaps are unaffected by it.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg import blas
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .tensor_hermite import hermite_features, multi_index_basis, project_features
from .teacher import Dataset

SQRT2 = math.sqrt(2.0)
# Rows per moment-matrix update; fixed so prefix sums are reproducible.
CHUNK = 4096


class EigensolverError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# first layer


def moment_matrix(features, y) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    y = np.asarray(y, dtype=float)
    if f.ndim != 2 or f.shape[0] != y.shape[0] or y.shape[0] < 1:
        raise ValueError("features must be n x D with n = len(y) >= 1")
    c = (f.T * y) @ f
    c = 0.5 * (c + c.T)
    c[np.diag_indices_from(c)] -= y.sum()
    return c / (y.shape[0] * SQRT2)


class MomentAccumulator:
    """Running ``sum_mu y_mu F_mu F_mu^T``, built from chunked symmetric rank-k updates.

    Each chunk is split by the sign of ``y`` so both halves are plain SYRK
    calls on ``sqrt(|y|) F``.  Chunk products may run in float32; the running
    sum is always float64.
    """

    def __init__(self, D: int, dtype=np.float64):
        self.D = D
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError("accumulation dtype must be float32 or float64")
        self._syrk = blas.dsyrk if self.dtype == np.float64 else blas.ssyrk
        self.upper = np.zeros((D, D))
        self.sum_y = 0.0
        self.n = 0

    def chunk_gram(self, features: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros((self.D, self.D))
        f = np.asarray(features, dtype=self.dtype)
        for mask, sign in ((y > 0, 1.0), (y < 0, -1.0)):
            if mask.any():
                g = f[mask] * np.sqrt(np.abs(y[mask])).astype(self.dtype)[:, None]
                # trans=0 on the (D, m) Fortran view computes g^T g without a copy
                out += sign * self._syrk(1.0, g.T, trans=0, lower=0)
        return out

    def add(self, features: np.ndarray, y: np.ndarray) -> None:
        self.upper += self.chunk_gram(features, y)
        self.sum_y += float(np.sum(y))
        self.n += y.shape[0]

    def matrix(self, extra: np.ndarray | None = None, extra_y: float = 0.0, extra_n: int = 0) -> np.ndarray:
        upper = self.upper if extra is None else self.upper + extra
        n = self.n + extra_n
        if n < 1:
            raise ValueError("no samples accumulated")
        c = np.triu(upper) + np.triu(upper, 1).T
        c[np.diag_indices_from(c)] -= self.sum_y + extra_y
        c /= n * SQRT2
        return c


def moment_path(x: np.ndarray, y: np.ndarray, basis, n_list, dtype=np.float64, chunk: int = CHUNK):
    """Yield ``(n, C_n)`` for increasing ``n`` using prefixes of ``(x, y)``.

    Every ``C_n`` is bit-identical to ``moment_path(x[:n], y[:n], basis, [n])``.
    """
    ns = sorted(set(int(n) for n in n_list))
    if not ns or ns[0] < 1 or ns[-1] > x.shape[0]:
        raise ValueError("sample sizes must lie in [1, rows(x)]")
    acc = MomentAccumulator(basis.size, dtype)
    pos = 0
    for n in ns:
        while pos + chunk <= n:
            acc.add(hermite_features(x[pos : pos + chunk], basis), y[pos : pos + chunk])
            pos += chunk
        if pos < n:
            yp = y[pos:n]
            extra = acc.chunk_gram(hermite_features(x[pos:n], basis), yp)
            yield n, acc.matrix(extra, float(np.sum(yp)), n - pos)
        else:
            yield n, acc.matrix()


def _canonical_signs(v: np.ndarray) -> np.ndarray:
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivot, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def _select(w: np.ndarray, k: int, selection: str) -> np.ndarray:
    # w ascending; a stable sort keeps the lower original index first on ties
    if selection == "abs":
        return np.argsort(-np.abs(w), kind="stable")[:k]
    if selection == "signed":
        return np.argsort(-w, kind="stable")[:k]
    raise ValueError("selection must be 'abs' or 'signed'")


def eigen_decomposition(c_hat: np.ndarray, k: int, solver: str = "dense", selection: str = "abs"):
    """Top-``k`` eigenpairs plus the full spectrum (dense solver only, else None)."""
    c_hat = np.asarray(c_hat, dtype=float)
    D = c_hat.shape[0]
    if c_hat.shape != (D, D):
        raise ValueError("c_hat must be square")
    if not 1 <= k <= D:
        raise ValueError(f"k = {k} must lie in [1, {D}]")
    if solver == "iterative" and 2 * k < D - 1 and selection == "abs":
        try:
            v0 = np.full(D, 1.0 / math.sqrt(D))
            wt, vt = eigsh(c_hat, k=k, which="LA", v0=v0)
            wb, vb = eigsh(-c_hat, k=k, which="LA", v0=v0)
        except ArpackNoConvergence as exc:
            raise EigensolverError(f"iterative eigensolver did not converge: {exc}") from exc
        w = np.concatenate([-wb, wt])
        v = np.concatenate([vb, vt], axis=1)
        order = np.argsort(w, kind="stable")
        w, v = w[order], v[:, order]
        spectrum = None
    elif solver in ("dense", "iterative"):
        try:
            w, v = scipy.linalg.eigh(c_hat, driver="evd")
        except np.linalg.LinAlgError as exc:
            raise EigensolverError(f"dense eigensolver failed: {exc}") from exc
        spectrum = w
    else:
        raise ValueError("solver must be 'dense' or 'iterative'")
    pick = _select(w, k, selection)
    return w[pick], _canonical_signs(v[:, pick]), spectrum


def top_directions(c_hat, k: int, solver: str = "dense", selection: str = "abs"):
    """``k`` eigenpairs of largest |eigenvalue|, eigenvalues in |.|-descending order."""
    w, v, _ = eigen_decomposition(c_hat, k, solver, selection)
    return w, v


def first_layer_features(u_hat: np.ndarray, features: np.ndarray) -> np.ndarray:
    if features.shape[-1] != u_hat.shape[0]:
        raise ValueError(f"features have {features.shape[-1]} columns, u_hat has {u_hat.shape[0]} rows")
    return features @ u_hat


# --------------------------------------------------------------------------
# second layer and readout


def second_layer_estimate(h1_hat, y) -> np.ndarray:
    h = np.asarray(h1_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if h.shape[0] != y.shape[0] or y.shape[0] < 1:
        raise ValueError("h1_hat must have one row per label, n >= 1")
    a = (h.T * y) @ h / y.shape[0]
    a = 0.5 * (a + a.T)
    a[np.diag_indices_from(a)] -= y.mean()
    return a / SQRT2


def scalar_feature(a2_hat, h1_hat):
    """``<A, He_2(h)>`` for one latent vector or a batch of rows."""
    a = np.asarray(a2_hat, dtype=float)
    h = np.asarray(h1_hat, dtype=float)
    if h.shape[-1] != a.shape[0]:
        raise ValueError("latent length does not match a2_hat")
    val = (np.einsum("...i,ij,...j->...", h, a, h) - np.trace(a)) / SQRT2
    return float(val) if np.ndim(val) == 0 else val


@dataclass(frozen=True, eq=False)
class ReadoutFit:
    """Polynomial in the standardized feature ``(t - center) / scale``."""

    degree: int
    ridge: float
    coef: np.ndarray
    center: float = 0.0
    scale: float = 1.0

    def __call__(self, t):
        s = (np.asarray(t, dtype=float) - self.center) / self.scale
        return np.polynomial.polynomial.polyval(s, self.coef)

    def raw_coefficients(self) -> np.ndarray:
        """Coefficients of the same polynomial in the unstandardized variable."""
        poly = np.polynomial.Polynomial(self.coef)
        inner = np.polynomial.Polynomial([-self.center / self.scale, 1.0 / self.scale])
        raw = poly(inner).coef
        return np.pad(raw, (0, self.degree + 1 - raw.size))


def fit_readout(h2_hat, y, degree: int, ridge: float) -> ReadoutFit:
    t = np.asarray(h2_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    m = t.shape[0]
    if m != y.shape[0]:
        raise ValueError("h2_hat and y lengths differ")
    if degree < 0 or m < degree + 1:
        raise ValueError(f"need at least degree+1 = {degree + 1} samples, got {m}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    center = float(t.mean())
    scale = float(t.std())
    if scale == 0.0:
        scale = 1.0
    phi = np.vander((t - center) / scale, degree + 1, increasing=True)
    # (1/m)||y - phi a||^2 + ridge ||a[1:]||^2 as one stacked least-squares problem
    penalty = math.sqrt(ridge) * np.eye(degree + 1)[1:]
    lhs = np.vstack([phi / math.sqrt(m), penalty])
    rhs = np.concatenate([y / math.sqrt(m), np.zeros(degree)])
    coef, _, rank, _ = np.linalg.lstsq(lhs, rhs, rcond=None)
    if rank < degree + 1:
        raise np.linalg.LinAlgError("readout design is rank deficient; use ridge > 0")
    return ReadoutFit(degree, float(ridge), coef, center, scale)


# --------------------------------------------------------------------------
# end to end


@dataclass(frozen=True)
class ReadoutHyper:
    degree: int = 3
    ridge: float = 1e-5


@dataclass(frozen=True, eq=False)
class SpectralFit:
    d: int
    q: int
    eigvals: np.ndarray
    u_hat: np.ndarray
    a2_hat: np.ndarray
    readout: ReadoutFit
    full_spectrum: np.ndarray | None = None

    @property
    def basis(self):
        return multi_index_basis(self.d, self.q)

    def latent(self, x: np.ndarray) -> np.ndarray:
        return project_features(x, self.u_hat, self.basis)

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.readout(scalar_feature(self.a2_hat, self.latent(x)))

    def spectrum_csv(self, path) -> None:
        if self.full_spectrum is None:
            raise ValueError("fit was run without keeping the full spectrum")
        with open(path, "w") as fh:
            fh.write("eigenvalue\n")
            fh.writelines(f"{v!r}\n" for v in self.full_spectrum)

    def to_json(self) -> str:
        def enc(a):
            a = np.ascontiguousarray(a, dtype="<f8")
            return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}

        r = self.readout
        doc = {
            "d": self.d,
            "q": self.q,
            "eigvals": enc(self.eigvals),
            "u_hat": enc(self.u_hat),
            "a2_hat": enc(self.a2_hat),
            "readout": {"degree": r.degree, "ridge": r.ridge, "coef": enc(r.coef), "center": r.center, "scale": r.scale},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "SpectralFit":
        def dec(o):
            return np.frombuffer(base64.b64decode(o["data"]), dtype="<f8").reshape(o["shape"]).astype(float)

        doc = json.loads(text)
        r = doc["readout"]
        readout = ReadoutFit(r["degree"], r["ridge"], dec(r["coef"]), r["center"], r["scale"])
        return cls(doc["d"], doc["q"], dec(doc["eigvals"]), dec(doc["u_hat"]), dec(doc["a2_hat"]), readout)


def predict(fit: SpectralFit, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict expects one input vector; use SpectralFit.predict_batch")
    return float(fit.predict_batch(x[None, :])[0])


@dataclass(frozen=True)
class FitOptions:
    solver: str = "dense"
    selection: str = "abs"
    dtype: str = "float64"
    keep_spectrum: bool = False
    # fraction of the training batch held out for the readout when no fresh batch is given
    readout_split: float = 0.5


def _readout_stage(u_hat, a2_hat, readout_data: Dataset, basis, hyper: ReadoutHyper) -> ReadoutFit:
    h1 = project_features(readout_data.x, u_hat, basis)
    return fit_readout(scalar_feature(a2_hat, h1), readout_data.y, hyper.degree, hyper.ridge)


def complete_fit(
    u_hat: np.ndarray,
    train: Dataset,
    readout_data: Dataset,
    teacher_dims,
    hyper: ReadoutHyper,
    eigvals=None,
    c_hat=None,
    spectrum=None,
) -> SpectralFit:
    """Second layer and readout on top of given first-layer directions.

    When the moment matrix of the same training batch is supplied, the
    second-layer matrix is read off as ``U^T C U``, which equals the sample
    average of ``y He_2(U^T F)`` exactly.
    """
    d, q, d1 = teacher_dims
    basis = multi_index_basis(d, q)
    u_hat = np.asarray(u_hat, dtype=float)
    if u_hat.shape != (basis.size, d1):
        raise ValueError(f"u_hat must be {basis.size} x {d1}")
    if c_hat is not None:
        a2 = u_hat.T @ c_hat @ u_hat
        a2 = 0.5 * (a2 + a2.T)
    else:
        a2 = second_layer_estimate(project_features(train.x, u_hat, basis), train.y)
    readout = _readout_stage(u_hat, a2, readout_data, basis, hyper)
    if eigvals is None:
        eigvals = np.full(d1, np.nan)
    return SpectralFit(d, q, np.asarray(eigvals, dtype=float), u_hat, a2, readout, spectrum)


def _split(train: Dataset, readout_data: Dataset | None, fraction: float):
    if readout_data is not None:
        return train, readout_data
    if not 0.0 < fraction < 1.0:
        raise ValueError("readout_split must lie in (0, 1)")
    cut = int(round(train.n * (1.0 - fraction)))
    if cut < 1 or cut >= train.n:
        raise ValueError("training batch too small to split")
    return Dataset(train.x[:cut], train.y[:cut]), Dataset(train.x[cut:], train.y[cut:])


def fit(
    train: Dataset,
    readout_data: Dataset | None,
    teacher_dims,
    hyper: ReadoutHyper = ReadoutHyper(),
    options: FitOptions = FitOptions(),
) -> SpectralFit:
    """Run the full training procedure.

    ``readout_data`` is the fresh batch used for the readout; pass None to
    carve it out of ``train`` according to ``options.readout_split``.
    """
    train, readout_data = _split(train, readout_data, options.readout_split)
    return next(fit_path(train, readout_data, teacher_dims, [train.n], hyper, options))[1]


def fit_path(
    train: Dataset,
    readout_data: Dataset,
    teacher_dims,
    n_list,
    hyper: ReadoutHyper = ReadoutHyper(),
    options: FitOptions = FitOptions(),
):
    """Yield ``(n, fit)`` on training and readout prefixes of size ``n``, in increasing ``n``.

    Each fit is identical to ``fit(train.head(n), readout_data.head(n), ...)``.
    """
    d, q, d1 = teacher_dims
    basis = multi_index_basis(d, q)
    if d1 > basis.size:
        raise ValueError(f"d1 = {d1} exceeds D = {basis.size}")
    if train.x.shape[1] != d:
        raise ValueError("training inputs do not match d")
    ns = sorted(set(int(n) for n in n_list))
    for n, c_hat in moment_path(train.x, train.y, basis, ns, np.dtype(options.dtype)):
        eigvals, u_hat, spectrum = eigen_decomposition(c_hat, d1, options.solver, options.selection)
        yield n, complete_fit(
            u_hat,
            train.head(n),
            readout_data.head(min(n, readout_data.n)),
            teacher_dims,
            hyper,
            eigvals=eigvals,
            c_hat=c_hat,
            spectrum=spectrum if options.keep_spectrum else None,
        )
