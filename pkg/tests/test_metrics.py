from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from hierspec import metrics
from hierspec.metrics import (
    OutOfWindowWarning,
    TrialResult,
    bulk_edge,
    bulk_edge_from_inputs,
    count_recovered,
    crossing_point,
    direction_alignment,
    direction_cos2,
    feature_overlap,
    loglog_slope,
    ordering_spearman,
    predicted_count,
    predicted_mse,
    predicted_threshold,
)
from hierspec.tensor_hermite import hermite_features, multi_index_basis


def test_feature_overlap_examples() -> None:
    h = np.random.default_rng(0).standard_normal((200, 3))
    assert feature_overlap(h, h) == pytest.approx(1.0)
    assert feature_overlap(h, h @ np.array([[1, 2, 0], [0, 1, 0], [3, 0, 1.0]])) == pytest.approx(1.0)
    e = np.eye(4)
    assert feature_overlap(e[:, :2], e[:, 2:]) == pytest.approx(0.0, abs=1e-15)
    assert feature_overlap(e[:, :2], e[:, [0, 2]]) == pytest.approx(0.5)


def test_feature_overlap_rank_deficient_and_shape() -> None:
    h = np.random.default_rng(1).standard_normal((50, 2))
    bad = np.column_stack([h[:, 0], 2 * h[:, 0]])
    with pytest.warns(RuntimeWarning):
        val, flag = feature_overlap(h, bad, return_flag=True)
    assert flag and val == pytest.approx(0.5)
    with pytest.raises(ValueError):
        feature_overlap(h, h[:10])


def test_direction_alignment_and_cos2() -> None:
    u = np.eye(4)[:, :2]
    assert direction_alignment(u, np.array([1.0, 0, 0, 0])) == 1.0
    assert direction_alignment(u, np.array([0, 0, 1.0, 0])) == 0.0
    with pytest.raises(ValueError):
        direction_alignment(u, np.array([2.0, 0, 0, 0]))
    rows = np.array([[3.0, 0, 4.0, 0], [0, 0, 0, 5.0]])
    np.testing.assert_allclose(direction_cos2(u, rows), [9 / 25, 0.0])


def test_bulk_edge_matches_chunked_version() -> None:
    rng = np.random.default_rng(2)
    basis = multi_index_basis(4, 2)
    x, y = rng.standard_normal((900, 4)), rng.standard_normal(900)
    direct = bulk_edge(hermite_features(x, basis), y, seed=3)
    assert bulk_edge_from_inputs(x, y, basis, seed=3) == pytest.approx(direct, rel=1e-12)
    assert bulk_edge(hermite_features(x, basis), y, seed=3) == direct
    assert bulk_edge(hermite_features(x, basis), y, seed=4) != direct
    with pytest.raises(ValueError):
        bulk_edge(np.zeros((0, 3)), np.zeros(0), 0)


def test_predicted_threshold_values() -> None:
    # Z^2 for d1 = 8, gamma = 0.4 computed by direct summation
    z2 = 1.0 / sum(i**-0.8 for i in range(1, 9))
    assert predicted_threshold(1, 64, 2, 0.4, 8) == pytest.approx(64**2 / z2)
    assert predicted_threshold(8, 64, 2, 0.4, 8) == pytest.approx(64**2 * 8**0.8 / z2)
    assert predicted_threshold(3, 10, 2, 0.0, 16) == pytest.approx(100 * 16)
    assert predicted_threshold(1, 10, 2, 0.4, 3, d_eff="B") == pytest.approx(
        55 * sum(i**-0.8 for i in range(1, 4))
    )
    with pytest.raises(ValueError):
        predicted_threshold(9, 64, 2, 0.4, 8)
    with pytest.raises(ValueError):
        predicted_threshold(1, 64, 2, 0.4, 8, d_eff="x")


@pytest.mark.parametrize("gamma", [0.25, 0.4, 0.8, 1.0])
def test_predicted_count_inverts_threshold(gamma: float) -> None:
    for i in range(1, 9):
        n_i = predicted_threshold(i, 64, 2, gamma, 8)
        assert predicted_count(n_i, 64, 2, gamma, 8) == pytest.approx(i, rel=1e-10)
    counts = [predicted_count(n, 64, 2, gamma, 8) for n in np.geomspace(1, 1e9, 50)]
    assert all(b >= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 8
    with pytest.raises(ValueError):
        predicted_count(0, 64, 2, gamma, 8)


def test_predicted_count_flat_spectrum_is_a_step() -> None:
    n1 = predicted_threshold(1, 10, 2, 0.0, 16)
    assert predicted_count(n1 * 0.99, 10, 2, 0.0, 16) == 0
    assert predicted_count(n1, 10, 2, 0.0, 16) == 16


def test_predicted_mse_regimes() -> None:
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert predicted_mse(1e6, 100, 2, 1.0, 10) == pytest.approx(100 ** -0.5)
        assert predicted_mse(5e4, 100, 2, 0.25, 10, regime="slow") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        predicted_mse(1e6, 100, 2, 0.5, 10)
    with pytest.raises(ValueError):
        predicted_mse(1e6, 100, 2, 1.0, 10, regime="slow")
    with pytest.warns(OutOfWindowWarning):
        predicted_mse(10.0, 100, 2, 1.0, 10)
    with pytest.warns(OutOfWindowWarning):
        assert predicted_mse(1e9, 100, 2, 0.25, 10) == 0.0


def test_predicted_mse_monotone_in_n() -> None:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutOfWindowWarning)
        for gamma in (0.2, 0.4, 0.8, 1.5):
            vals = [predicted_mse(n, 64, 2, gamma, 8) for n in np.geomspace(5e3, 5e4, 20)]
            assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_crossing_point() -> None:
    n = np.array([10.0, 100.0, 1000.0])
    assert crossing_point(n, [0.0, 1.0, 1.0]) == pytest.approx(10**1.5)
    assert math.isnan(crossing_point(n, [0.1, 0.2, 0.3]))
    assert math.isnan(crossing_point(n, [0.6, 0.9, 1.0]))
    assert crossing_point(n, [0.1, 0.5, 0.9]) == pytest.approx(100.0)


def test_loglog_slope_and_spearman() -> None:
    x = np.array([1.0, 2.0, 4.0, 8.0])
    s = loglog_slope(x, 3 * x**-1.5)
    assert s.slope == pytest.approx(-1.5) and s.points == 4
    assert math.isnan(loglog_slope([1.0], [1.0]).slope)
    assert loglog_slope([1.0, 2.0, np.nan], [1.0, 2.0, 3.0]).points == 2
    assert ordering_spearman([1.0, 5.0, 7.0, 30.0]) == pytest.approx(1.0)
    assert ordering_spearman([3.0, 2.0, 1.0], index=[1, 2, 4]) == pytest.approx(-1.0)
    assert math.isnan(ordering_spearman([np.nan, 1.0]))


def _result(**kw) -> TrialResult:
    base = dict(
        d=16, q=2, epsilon=0.5, gamma=0.4, n=1000, alpha=2.49, seed=0, readout="identity",
        test_mse=0.5, feature_overlap=0.3, per_direction_cos2=(0.9, 0.2, 0.6, 0.1),
        per_direction_err=(0.1, 0.8, 0.4, 0.9), spectrum_top=(1.0, 0.5, 0.2, 0.1),
        bulk_edge=0.4, m_empirical=2,
    )  # fmt: skip
    base.update(kw)
    return TrialResult(**base)


def test_trial_result_validation_and_csv() -> None:
    r = _result()
    assert r.d1 == 4
    assert TrialResult.header(5)[-1] == "cos2_5"
    row = r.csv_row(5)
    assert len(row) == len(TrialResult.header(5)) and row[-1] == ""
    assert row[metrics.CSV_FIELDS.index("wall_time")] == ""
    assert _result(wall_time=1.0) == r
    with pytest.raises(ValueError):
        _result(feature_overlap=1.5)
    with pytest.raises(ValueError):
        _result(per_direction_cos2=(0.1, -0.1, 0.2, 0.3))
    with pytest.raises(ValueError):
        _result(m_empirical=5)


def test_count_recovered() -> None:
    assert count_recovered([0.5, 0.49, 0.9, 0.0]) == 2
    assert count_recovered([]) == 0
