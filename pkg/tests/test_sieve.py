import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxgmm.errors import DegenerateCovariateWarning, InsufficientData
from auxgmm.sieve import (
    BasisKind,
    BasisSpec,
    Interaction,
    build_basis,
    eval_basis,
    predict,
    predict_many,
    sieve_ls_fit,
)

RNG = np.random.default_rng(99)


def power(degree):
    return BasisSpec(kind=BasisKind.POWER, degree=degree)


def test_power_series_degree_two():
    basis = build_basis(power(2), RNG.normal(size=(50, 1)))
    assert basis.k_n == 3
    np.testing.assert_allclose(eval_basis(basis, [2.0]), [1.0, 2.0, 4.0])


def test_cubic_spline_ten_knots_has_fourteen_terms():
    basis = build_basis(BasisSpec(kind=BasisKind.SPLINE, degree=3, n_knots=10),
                        RNG.normal(size=(200, 1)))
    assert basis.k_n == 14  # 1 + 3 + 10


def test_truncated_power_pieces():
    basis = build_basis(BasisSpec(kind=BasisKind.SPLINE, degree=1, knots=((0.0,),)),
                        RNG.normal(size=(30, 1)))
    np.testing.assert_allclose(eval_basis(basis, [-1.0]), [1.0, -1.0, 0.0])
    np.testing.assert_allclose(eval_basis(basis, [1.0]), [1.0, 1.0, 1.0])


def test_constant_covariate_deduplicates_knots_with_warning():
    x = np.ones((40, 1))
    with pytest.warns(DegenerateCovariateWarning):
        basis = build_basis(BasisSpec(kind=BasisKind.SPLINE, degree=1, n_knots=5), x)
    assert len(basis.knots[0]) == 1


def test_knots_at_equal_range_quantiles():
    x = np.arange(1.0, 12.0).reshape(-1, 1)  # 1..11
    basis = build_basis(BasisSpec(kind=BasisKind.SPLINE, degree=1, n_knots=3), x)
    np.testing.assert_allclose(basis.knots[0], np.quantile(x[:, 0], [0.25, 0.5, 0.75]))


def test_insufficient_data_raises():
    with pytest.raises(InsufficientData):
        build_basis(BasisSpec(kind=BasisKind.SPLINE, degree=3, n_knots=10),
                    np.linspace(0, 1, 5).reshape(-1, 1))


def test_eval_matches_design_matrix_rows():
    x = RNG.normal(size=(25, 2))
    basis = build_basis(BasisSpec(kind=BasisKind.SPLINE, degree=2, n_knots=3), x)
    design = basis.design_matrix(x)
    for i in range(x.shape[0]):
        np.testing.assert_allclose(eval_basis(basis, x[i]), design[i], atol=1e-14)


def test_full_tensor_interaction_count():
    x = RNG.normal(size=(100, 2))
    basis = build_basis(BasisSpec(kind=BasisKind.POWER, degree=2,
                                  interaction=Interaction.FULL_TENSOR), x)
    assert basis.k_n == 9  # (2 + 1)^2 products
    assert basis.design_matrix(x).shape == (100, 9)


def test_intercept_reproduction():
    x = RNG.normal(size=(60, 1))
    basis = build_basis(power(3), x)
    fit = sieve_ls_fit(basis, x, np.full((60, 2), 4.25))
    for xi in (-2.0, 0.3, 5.0):
        np.testing.assert_allclose(predict(fit, [xi]), [4.25, 4.25], atol=1e-10)


def test_saturated_basis_equals_group_means():
    x = RNG.integers(0, 2, size=(500, 1)).astype(float)
    y = RNG.normal(size=(500, 1)) + 3 * x
    basis = build_basis(power(1), x)  # {1, x} is saturated on {0, 1}
    fit = sieve_ls_fit(basis, x, y)
    for level in (0.0, 1.0):
        cell_mean = y[x[:, 0] == level].mean()
        np.testing.assert_allclose(predict(fit, [level])[0], cell_mean, atol=1e-12)


def test_interpolation_when_n_equals_k():
    x = np.array([[0.0], [1.0], [2.0]])
    y = np.array([[1.0], [-1.0], [3.0]])
    basis = build_basis(power(2), x)
    fit = sieve_ls_fit(basis, x, y)
    assert fit.ridge == 0.0
    np.testing.assert_allclose(predict_many(fit, x), y, atol=1e-8)


def test_zero_coefficients_predict_zero():
    basis = build_basis(power(2), RNG.normal(size=(30, 1)))
    from auxgmm.sieve import ProjectionFit

    fit = ProjectionFit(basis=basis, coeffs=np.zeros((3, 2)), ridge=0.0, n_fit=30)
    np.testing.assert_allclose(predict(fit, [1.3]), [0.0, 0.0])


def test_exact_linear_recovery():
    x = RNG.normal(size=(80, 1))
    basis = build_basis(power(1), x)
    fit = sieve_ls_fit(basis, x, 2.0 * x)
    np.testing.assert_allclose(predict(fit, [3.0]), [6.0], atol=1e-9)


def test_normal_equation_residual_orthogonality():
    x = np.sort(RNG.normal(size=(120, 1)), axis=0)
    targets = np.sin(3 * x) + 0.1 * RNG.normal(size=(120, 1))
    basis = build_basis(BasisSpec(kind=BasisKind.SPLINE, degree=3, n_knots=4), x)
    fit = sieve_ls_fit(basis, x, targets)
    q = basis.design_matrix(x)
    lhs = q.T @ (targets - q @ fit.coeffs)
    np.testing.assert_allclose(lhs, fit.ridge * fit.coeffs,
                               atol=1e-8 * np.linalg.norm(targets))


def test_projection_idempotence():
    x = RNG.normal(size=(90, 1))
    targets = np.cos(x) + 0.05 * RNG.normal(size=(90, 1))
    basis = build_basis(power(3), x)
    fit = sieve_ls_fit(basis, x, targets)
    refit = sieve_ls_fit(basis, x, predict_many(fit, x))
    np.testing.assert_allclose(refit.coeffs, fit.coeffs, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5))
def test_fit_is_linear_in_targets(a, b):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(70, 1))
    t1 = np.sin(x)
    t2 = x ** 2
    basis = build_basis(power(2), x)
    combined = sieve_ls_fit(basis, x, a * t1 + b * t2)
    f1 = sieve_ls_fit(basis, x, t1)
    f2 = sieve_ls_fit(basis, x, t2)
    np.testing.assert_allclose(combined.coeffs, a * f1.coeffs + b * f2.coeffs,
                               atol=1e-8 * (1 + abs(a) + abs(b)))


def test_ridge_ladder_on_collinear_design():
    x = np.ones((50, 1)) * 2.0  # constant regressor duplicates the intercept
    with pytest.warns(DegenerateCovariateWarning):
        basis = build_basis(BasisSpec(kind=BasisKind.SPLINE, degree=1, n_knots=3), x)
    fit = sieve_ls_fit(basis, x, np.full((50, 1), 3.0))
    assert fit.ridge > 0.0
    np.testing.assert_allclose(predict(fit, [2.0]), [3.0], atol=1e-4)
