from __future__ import annotations

import json
import math

import numpy as np
import pytest

from hierspec.teacher import Readout, TeacherSpec, sample_teacher
from hierspec.theory import (
    CheckReport,
    QuadratureError,
    contraction_norm_scaling,
    dense_contract,
    hermite_coefficient,
    perturbation_identity_check,
    population_decay_check,
    population_moment_alignment,
    power_law_weights,
    product_formula_check,
    random_sym_dense,
    variance_normalization_check,
)

# E[tanh(Z) Z] by adaptive quadrature at 50 digits (independent of this package)
TANH_NU1 = 0.6057055096021588


def test_tanh_first_coefficient_frozen_oracle() -> None:
    assert hermite_coefficient("tanh", 1) == pytest.approx(TANH_NU1, abs=1e-9)
    # the rounded reference figure for this constant, within its stated tolerance
    assert hermite_coefficient("tanh", 1) == pytest.approx(0.60566, abs=1e-4)


def test_hermite_coefficients_of_polynomials() -> None:
    assert hermite_coefficient("identity", 1) == pytest.approx(1.0, abs=1e-12)
    assert hermite_coefficient("identity", 2) == pytest.approx(0.0, abs=1e-12)
    # He_3 = x^3 - 3x = sqrt(6) he_3
    he3 = Readout.polynomial([0.0, -3.0, 0.0, 1.0])
    assert hermite_coefficient(he3, 3) == pytest.approx(math.sqrt(6), abs=1e-10)
    assert hermite_coefficient(he3, 1) == pytest.approx(0.0, abs=1e-10)
    assert hermite_coefficient("tanh", 2) == pytest.approx(0.0, abs=1e-12)


def test_hermite_coefficient_trace_and_errors() -> None:
    val, history = hermite_coefficient("tanh", 1, trace=True)
    assert history[0][0] == 64 and len(history) >= 2
    assert abs(history[-1][1] - history[-2][1]) <= 1e-8
    with pytest.raises(ValueError):
        hermite_coefficient("tanh", -1)
    with pytest.raises(QuadratureError):
        hermite_coefficient("tanh", 1, nodes=4, tol=1e-30, max_nodes=16)


def test_random_sym_dense_is_symmetric_with_right_scale() -> None:
    rng = np.random.default_rng(0)
    a = random_sym_dense(rng, 6, 3)
    for perm in [(1, 0, 2), (2, 1, 0), (0, 2, 1)]:
        np.testing.assert_allclose(a, a.transpose(perm), atol=1e-15)
    samples = np.array([random_sym_dense(rng, 30, 2)[0, 1] for _ in range(2000)])
    assert samples.var() == pytest.approx(1 / 900, rel=0.1)


def test_dense_contract_shapes() -> None:
    a = np.ones((3, 3, 3))
    b = np.ones((3, 3))
    assert dense_contract(a, b, 1).shape == (3, 3, 3)
    assert dense_contract(a, b, 2).shape == (3,)
    assert float(dense_contract(b, b, 2)) == 9.0


def test_cross_contraction_slope_small_run() -> None:
    rep = contraction_norm_scaling(2, 1, [8, 16, 32], trials=60, mode="cross", seed=1, tolerance=0.25)
    assert rep.passed, rep.slope
    assert json.loads(json.dumps(rep.to_dict()))["rule"] == "eq"


def test_full_self_contraction_is_flat() -> None:
    rep = contraction_norm_scaling(2, 2, [8, 16, 32], trials=40, mode="self", seed=2)
    assert rep.expected == 0.0 and rep.passed, rep.slope


def test_contraction_argument_errors() -> None:
    with pytest.raises(ValueError):
        contraction_norm_scaling(2, 3, [4, 8], trials=2, mode="cross")
    with pytest.raises(ValueError):
        contraction_norm_scaling(2, 1, [4, 8], trials=2, mode="other")


def test_perturbation_check_quadratic_residual() -> None:
    lam = np.arange(1, 6) ** -0.4
    rep = perturbation_identity_check(lam, 80, [1e-3, 3e-3, 1e-2], trials=2, seed=0)
    assert rep.passed, rep.slope
    with pytest.raises(ValueError):
        perturbation_identity_check(lam, 80, [0.1], trials=1)


def test_product_formula_check_small() -> None:
    rep = product_formula_check(3, 60_000, seed=4)
    assert rep.passed, rep.details
    assert rep.details["expected_variance"] == pytest.approx(1 + rep.details["inner_ab"] ** 2)
    with pytest.raises(ValueError):
        product_formula_check(1, 100)


def test_variance_normalization_small() -> None:
    rep = variance_normalization_check([4, 16, 64], [0.0, 1.0], 30_000, seed=0)
    assert rep.passed, rep.details
    for cell in rep.details["cells"]:
        assert all(v == pytest.approx(1.0, abs=0.05) for v in cell["variance"])


def test_power_law_weights() -> None:
    w = power_law_weights(5, 0.7)
    assert np.all(np.diff(w) < 0)
    assert float(w @ w) == pytest.approx(1.0)


def test_population_alignment_skip_and_size_guard() -> None:
    even = sample_teacher(TeacherSpec(d=4, seed=0))
    rep = population_moment_alignment(even, 20_000)
    assert isinstance(rep, CheckReport) and not rep.skipped
    square = TeacherSpec(d=4, epsilon=0.5, readout="poly:-1,0,1")
    with pytest.warns(UserWarning):
        t = sample_teacher(square)
    assert population_moment_alignment(t, 10).skipped
    with pytest.raises(ValueError):
        population_moment_alignment(even, 100)


def test_population_alignment_error_shrinks_with_dimension() -> None:
    rep = population_decay_check(d_pair=(8, 16), per_feature=3000, seed=1)
    assert rep.passed, rep.details
    errs = rep.details["relative_error"]
    assert errs["16"] < errs["8"] - 2 * rep.details["mc_relative_error"]["8"]
