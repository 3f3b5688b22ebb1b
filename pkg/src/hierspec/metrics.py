"""Recovery diagnostics, trial records and closed-form threshold/rate predictors."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import stats

from .seeding import stream
from .spectral import SpectralFit, moment_matrix, moment_path
from .teacher import Dataset, Teacher, normalization_constant, sample_dataset

RECOVERY_LEVEL = 0.5
CSV_FIELDS = (
    "d", "q", "epsilon", "gamma", "n", "alpha", "seed", "readout",
    "test_mse", "feature_overlap", "m_empirical", "bulk_edge", "wall_time",
)  # fmt: skip


class OutOfWindowWarning(UserWarning):
    """Predictor evaluated outside the sample-size window where its rate applies."""


# --------------------------------------------------------------------------
# empirical diagnostics


def mse_on(fit: SpectralFit, data: Dataset) -> float:
    err = fit.predict_batch(data.x) - data.y
    return float(np.mean(err * err))


def test_mse(fit: SpectralFit, teacher: Teacher, n_test: int, seed: int) -> float:
    if n_test < 1:
        raise ValueError("n_test must be at least 1")
    return mse_on(fit, sample_dataset(teacher, n_test, seed, "test"))


test_mse.__test__ = False  # keep pytest from collecting the metric by name


def _column_basis(h: np.ndarray, tol: float) -> tuple[np.ndarray, bool]:
    u, s, _ = scipy.linalg.svd(h, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return u[:, :0], True
    rank = int(np.sum(s > tol * s[0]))
    return u[:, :rank], rank < h.shape[1]


def feature_overlap(h1_true, h1_hat, tol: float = 1e-10, return_flag: bool = False):
    """Mean squared canonical correlation between the two column spaces.

    Rank-deficient inputs use their realized ranks and raise a RuntimeWarning;
    ``return_flag=True`` also returns whether that happened.
    """
    a = np.asarray(h1_true, dtype=float)
    b = np.asarray(h1_hat, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise ValueError("both feature matrices need the same number of rows")
    d1 = a.shape[1]
    qa, def_a = _column_basis(a, tol)
    qb, def_b = _column_basis(b, tol)
    deficient = def_a or def_b
    if deficient:
        warnings.warn("feature_overlap on rank-deficient input", RuntimeWarning, stacklevel=2)
    value = float(np.sum((qa.T @ qb) ** 2) / d1)
    value = min(max(value, 0.0), 1.0)
    return (value, deficient) if return_flag else value


def direction_alignment(u_hat, u_i) -> float:
    u_i = np.asarray(u_i, dtype=float)
    if abs(np.linalg.norm(u_i) - 1.0) > 1e-8:
        raise ValueError("u_i must be a unit vector")
    proj = np.asarray(u_hat).T @ u_i
    return float(min(proj @ proj, 1.0))


def direction_cos2(u_hat: np.ndarray, a1: np.ndarray) -> np.ndarray:
    """``cos^2`` between each teacher row (normalized) and the span of ``u_hat``."""
    units = a1 / np.linalg.norm(a1, axis=1, keepdims=True)
    return np.minimum(np.sum((u_hat.T @ units.T) ** 2, axis=0), 1.0)


def bulk_edge(features, y, seed: int) -> float:
    """Largest |eigenvalue| of the moment matrix after destroying the label pairing."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 1:
        raise ValueError("n must be at least 1")
    w = scipy.linalg.eigvalsh(moment_matrix(features, permuted_labels(y, seed)), driver="evd")
    return float(np.max(np.abs(w)))


def permuted_labels(y: np.ndarray, seed: int) -> np.ndarray:
    return y[stream(seed, "bulk-permutation").permutation(y.shape[0])]


# --------------------------------------------------------------------------
# theory predictors


def _d_eff(d: int, q: int, d_eff: str) -> float:
    if d_eff == "dq":
        return float(d) ** q
    if d_eff == "B":
        return float(math.comb(d + q - 1, q))
    raise ValueError("d_eff must be 'dq' or 'B'")


def predicted_threshold(i: int, d: int, q: int, gamma: float, d1: int, c_thr: float = 1.0, d_eff: str = "dq") -> float:
    if not 1 <= i <= d1:
        raise ValueError(f"direction index {i} outside [1, {d1}]")
    z = normalization_constant(d1, gamma)
    return c_thr * _d_eff(d, q, d_eff) * i ** (2.0 * gamma) / z**2


def predicted_count(n: float, d: int, q: int, gamma: float, d1: int, c_thr: float = 1.0, d_eff: str = "dq") -> float:
    if n < 1:
        raise ValueError("n must be at least 1")
    if gamma == 0:
        return float(d1) if n >= predicted_threshold(1, d, q, 0.0, d1, c_thr, d_eff) else 0.0
    z = normalization_constant(d1, gamma)
    m = (z**2 * n / (c_thr * _d_eff(d, q, d_eff))) ** (1.0 / (2.0 * gamma))
    return float(min(max(m, 0.0), d1))


def predicted_mse(
    n: float,
    d: int,
    q: int,
    gamma: float,
    d1: int,
    regime: str | None = None,
    c_mse: float = 1.0,
    baseline: float = 1.0,
) -> float:
    """Generalization-error rate; ``regime`` is 'slow' (gamma < 1/2) or 'fast' (gamma > 1/2).

    The slow-regime expression is clipped at zero past the end of its window.
    """
    if gamma == 0.5:
        raise ValueError("gamma = 1/2 is the log-corrected boundary case, not covered")
    auto = "slow" if gamma < 0.5 else "fast"
    if regime is not None and regime != auto:
        raise ValueError(f"regime {regime!r} does not match gamma = {gamma}")
    dq = float(d) ** q
    if n <= dq or (auto == "slow" and n >= dq * d1):
        warnings.warn(f"n = {n:g} outside the validity window of the {auto} rate", OutOfWindowWarning, stacklevel=2)
    if auto == "fast":
        return c_mse * (n / dq) ** (-1.0 + 1.0 / (2.0 * gamma))
    ratio = n / (d1 * dq)
    if gamma == 0:
        return baseline if ratio < 1 else 0.0
    return max(baseline - c_mse * ratio ** (1.0 / (2.0 * gamma) - 1.0), 0.0)


# --------------------------------------------------------------------------
# sweep aggregates


def crossing_point(n_values, cos2, level: float = RECOVERY_LEVEL) -> float:
    """First upward crossing of ``level``, interpolated linearly in log n.

    NaN when the curve never reaches ``level`` or already sits above it at the
    first grid point (the crossing is censored).
    """
    n_values = np.asarray(n_values, dtype=float)
    cos2 = np.asarray(cos2, dtype=float)
    above = np.nonzero(cos2 >= level)[0]
    if above.size == 0 or above[0] == 0:
        return math.nan
    j = above[0]
    x0, x1 = math.log(n_values[j - 1]), math.log(n_values[j])
    y0, y1 = cos2[j - 1], cos2[j]
    return math.exp(x0 + (level - y0) * (x1 - x0) / (y1 - y0))


@dataclass(frozen=True)
class Slope:
    slope: float
    stderr: float
    intercept: float
    points: int


def loglog_slope(x, y) -> Slope:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if keep.sum() < 2:
        return Slope(math.nan, math.nan, math.nan, int(keep.sum()))
    fit = stats.linregress(np.log(x[keep]), np.log(y[keep]))
    stderr = float(fit.stderr) if keep.sum() > 2 else math.nan
    return Slope(float(fit.slope), stderr, float(fit.intercept), int(keep.sum()))


def ordering_spearman(n_star, index=None) -> float:
    n_star = np.asarray(n_star, dtype=float)
    index = np.arange(1, n_star.size + 1) if index is None else np.asarray(index)
    keep = np.isfinite(n_star)
    if keep.sum() < 2:
        return math.nan
    return float(stats.spearmanr(index[keep], n_star[keep]).statistic)


# --------------------------------------------------------------------------
# trial record


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


@dataclass(frozen=True)
class TrialResult:
    d: int
    q: int
    epsilon: float
    gamma: float
    n: int
    alpha: float
    seed: int
    readout: str
    test_mse: float
    feature_overlap: float
    per_direction_cos2: tuple
    per_direction_err: tuple
    spectrum_top: tuple
    bulk_edge: float
    m_empirical: int
    rank_deficient: bool = False
    wall_time: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.feature_overlap <= 1.0:
            raise ValueError("feature_overlap outside [0, 1]")
        if any(not 0.0 <= c <= 1.0 for c in self.per_direction_cos2):
            raise ValueError("cos^2 outside [0, 1]")
        if self.m_empirical > len(self.per_direction_cos2):
            raise ValueError("m_empirical exceeds d1")

    @property
    def d1(self) -> int:
        return len(self.per_direction_cos2)

    @staticmethod
    def header(d1max: int) -> list[str]:
        return list(CSV_FIELDS) + [f"cos2_{i}" for i in range(1, d1max + 1)]

    def csv_row(self, d1max: int) -> list[str]:
        row = [_fmt(getattr(self, name)) for name in CSV_FIELDS]
        cos2 = [repr(float(c)) for c in self.per_direction_cos2]
        return row + cos2 + [""] * (d1max - len(cos2))


def count_recovered(cos2, level: float = RECOVERY_LEVEL) -> int:
    return int(np.sum(np.asarray(cos2) >= level))


def bulk_edge_from_inputs(x: np.ndarray, y: np.ndarray, basis, seed: int, dtype=np.float64) -> float:
    """``bulk_edge`` computed in row chunks, for batches too large to hold as features."""
    ((_, c),) = moment_path(x, permuted_labels(np.asarray(y, dtype=float), seed), basis, [y.shape[0]], dtype)
    return float(np.max(np.abs(scipy.linalg.eigvalsh(c, driver="evd"))))
