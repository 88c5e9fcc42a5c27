"""Uniform B-splines: explicit formula, interpolation and tensor evaluation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from bpinn.jet import Jet2
from bpinn.spline import (SplineCoeffs, SplineSpec, approximation_report, basis_jets, basis_matrix,
                          bspline_eval, cox_de_boor, interpolation_sites, loglog_slope,
                          quasi_interpolant, spline_eval, uniform_knots)


def sin_jet(X):
    x = X[:, 0]
    w = 2 * np.pi
    return Jet2(np.sin(w * x), (w * np.cos(w * x))[:, None], (-w * w * np.sin(w * x))[:, None, None])


class TestSpec:
    def test_counts(self):
        spec = SplineSpec(4, 5)
        assert spec.n_basis == 8
        np.testing.assert_array_equal(spec.indices, np.arange(-3, 5))
        assert spec.knot(2) == pytest.approx(0.4)

    def test_compilable_orders(self):
        assert SplineSpec(4, 2).compilable and SplineSpec(7, 2).compilable
        assert not SplineSpec(3, 2).compilable

    def test_invalid(self):
        with pytest.raises(ValueError):
            SplineSpec(1, 4)
        with pytest.raises(IndexError):
            SplineSpec(4, 4).check_index(4)
        with pytest.raises(ValueError):
            SplineCoeffs(SplineSpec(4, 4), np.zeros(3))


class TestBasis:
    @pytest.mark.parametrize("k", [2, 3, 4, 5, 7])
    @pytest.mark.parametrize("l", [1, 3, 8])
    def test_matches_cox_de_boor(self, k, l):
        spec = SplineSpec(k, l)
        x = np.linspace(0, 1, 257)
        knots = uniform_knots(spec)
        M = basis_matrix(spec, x)
        for col, i in enumerate(spec.indices):
            ref = cox_de_boor(knots, col, k, x)
            np.testing.assert_allclose(M[:, col], ref, atol=1e-13)

    @pytest.mark.parametrize("k", [3, 4, 7])
    def test_matches_scipy_derivatives(self, k):
        spec = SplineSpec(k, 6)
        knots = uniform_knots(spec)
        x = np.random.default_rng(0).random(200)
        for r in range(3):
            if r > k - 2:
                break
            M = basis_matrix(spec, x, r)
            for col in range(spec.n_basis):
                ref = BSpline.basis_element(knots[col:col + k + 1], extrapolate=False).derivative(r)(x) \
                    if r else BSpline.basis_element(knots[col:col + k + 1], extrapolate=False)(x)
                np.testing.assert_allclose(M[:, col], np.nan_to_num(ref), atol=1e-9 * spec.l ** r)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 7), st.integers(1, 16), st.floats(0, 1))
    def test_partition_of_unity(self, k, l, x):
        M = basis_matrix(SplineSpec(k, l), np.array([x]))
        np.testing.assert_allclose(M.sum(), 1.0, atol=1e-12)
        assert M.min() > -1e-12

    def test_hat_function(self):
        spec = SplineSpec(2, 4)
        assert bspline_eval(spec, 0, 0.25) == pytest.approx(1.0)
        assert bspline_eval(spec, 0, 0.125) == pytest.approx(0.5)

    def test_derivative_order_check(self):
        with pytest.raises(ValueError):
            bspline_eval(SplineSpec(4, 2), 0, 0.3, deriv_order=3)


class TestInterpolation:
    def test_sites_inside_supports(self):
        spec = SplineSpec(4, 5)
        sites = interpolation_sites(spec)
        assert sites.min() == 0.0 and sites.max() == 1.0
        M = basis_matrix(spec, sites)
        assert np.all(np.diag(M) > 0)

    @pytest.mark.parametrize("k", [2, 4, 7])
    def test_reproduces_polynomials(self, k):
        spec = SplineSpec(k, 5)
        deg = k - 1
        coeffs = quasi_interpolant(lambda X: X[:, 0] ** deg - 0.5 * X[:, 0], spec)
        x = np.linspace(0, 1, 41)[:, None]
        np.testing.assert_allclose(spline_eval(coeffs, x).value, x[:, 0] ** deg - 0.5 * x[:, 0], atol=1e-12)

    def test_jet_of_square(self):
        coeffs = quasi_interpolant(lambda X: X[:, 0] ** 2, SplineSpec(4, 4))
        j = spline_eval(coeffs, np.array([0.5]))
        np.testing.assert_allclose([j.value, j.grad[0], j.hess[0, 0]], [0.25, 1.0, 2.0], atol=1e-12)

    def test_tensor_product_exact(self):
        coeffs = quasi_interpolant(lambda X: X[:, 0] * X[:, 1], SplineSpec(4, 3, 2))
        X = np.random.default_rng(0).random((30, 2))
        j = spline_eval(coeffs, X)
        np.testing.assert_allclose(j.value, X[:, 0] * X[:, 1], atol=1e-13)
        np.testing.assert_allclose(j.grad, X[:, ::-1], atol=1e-12)
        np.testing.assert_allclose(j.hess[:, 0, 1], 1.0, atol=1e-11)

    def test_rejects_outside_domain(self):
        coeffs = quasi_interpolant(lambda X: X[:, 0], SplineSpec(4, 2))
        with pytest.raises(ValueError):
            spline_eval(coeffs, np.array([[1.5]]))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            quasi_interpolant(lambda X: np.full(len(X), np.nan), SplineSpec(4, 2))

    def test_coefficient_lookup(self):
        spec = SplineSpec(4, 3)
        c = SplineCoeffs(spec, np.arange(spec.n_basis, dtype=float))
        assert c.coefficient((-3,)) == 0.0 and c.coefficient((2,)) == 5.0
        assert c.sup_bound == 5.0


class TestBasisJets:
    def test_columns_match_coefficients(self):
        spec = SplineSpec(4, 3, 2)
        rng = np.random.default_rng(1)
        C = rng.standard_normal((spec.n_basis,) * 2)
        X = rng.random((10, 2))
        J = basis_jets(spec, X)
        ref = spline_eval(SplineCoeffs(spec, C), X)
        np.testing.assert_allclose(J.value @ C.ravel(), ref.value, rtol=1e-12)
        np.testing.assert_allclose(np.einsum("nfi,f->ni", J.grad, C.ravel()), ref.grad, rtol=1e-12)
        np.testing.assert_allclose(np.einsum("nfij,f->nij", J.hess, C.ravel()), ref.hess, rtol=1e-11)


class TestApproximationRates:
    def test_cubic_rates(self):
        rep = approximation_report(sin_jet, 4, [4, 8, 16, 32])
        assert rep.c0_slope == pytest.approx(-4.0, abs=0.4)
        assert rep.c2_slope == pytest.approx(-2.0, abs=0.3)
        assert len(rep.rows()) == 4

    def test_loglog_slope(self):
        assert loglog_slope([1, 2, 4], [1, 0.25, 0.0625]) == pytest.approx(-2.0)
