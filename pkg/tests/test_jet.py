"""Second-order jets: arithmetic, chain rule through sigma_3, affine maps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpinn.jet import (Jet2, affine, constant_jet, coordinates, jet_add, jet_mul, jet_scale,
                       jet_sigma3, lift_variable, zero_jet)


def _fd_jet(fn, x, h=1e-4):
    """Central-difference value/gradient/Hessian of a scalar function at x."""
    d = x.size
    eye = np.eye(d)
    grad = np.array([(fn(x + h * e) - fn(x - h * e)) / (2 * h) for e in eye])
    hess = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            hess[i, j] = (fn(x + h * eye[i] + h * eye[j]) - fn(x + h * eye[i] - h * eye[j])
                          - fn(x - h * eye[i] + h * eye[j]) + fn(x - h * eye[i] - h * eye[j])) / (4 * h * h)
    return fn(x), grad, hess


class TestConstruction:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            Jet2(np.zeros(3), np.zeros((3, 2)), np.zeros((3, 2, 3)))
        with pytest.raises(ValueError):
            Jet2(np.zeros(3), np.zeros((4, 2)), np.zeros((3, 2, 2)))

    def test_zero_and_constant(self):
        z = zero_jet(3, (5,))
        assert z.shape == (5,) and z.dim == 3
        c = constant_jet([1.0, 2.0], 2)
        np.testing.assert_array_equal(c.value, [1.0, 2.0])
        np.testing.assert_array_equal(c.grad, 0.0)
        np.testing.assert_array_equal(c.hess, 0.0)

    def test_lift_variable(self):
        x = np.array([[0.2, 0.3], [0.5, 0.1]])
        j = lift_variable(x, [2.0, -1.0])
        np.testing.assert_allclose(j.value, [0.1, 0.9])
        np.testing.assert_array_equal(j.grad, [[2.0, -1.0]] * 2)
        np.testing.assert_array_equal(j.hess, 0.0)

    def test_lift_variable_mismatch(self):
        with pytest.raises(ValueError):
            lift_variable(np.zeros(3), [1.0, 2.0])
        with pytest.raises(ValueError):
            lift_variable(np.zeros(2), [1.0, np.inf])

    def test_coordinates(self):
        x = np.array([[0.1, 0.2, 0.3]])
        j = coordinates(x)
        assert j.shape == (1, 3)
        np.testing.assert_array_equal(j.grad[0], np.eye(3))

    def test_indexing(self):
        j = coordinates(np.arange(6.0).reshape(3, 2))
        row = j[1]
        assert row.shape == (2,)
        np.testing.assert_array_equal(row.value, [2.0, 3.0])


class TestArithmetic:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            jet_add(zero_jet(1), zero_jet(2))

    def test_product_rule_against_closed_form(self):
        # u = x*y, v = x + y^2 at (0.3, 0.7): (uv)'' known in closed form
        x = np.array([0.3, 0.7])
        c = coordinates(x)
        u = jet_mul(c[0], c[1])
        v = jet_add(c[0], jet_mul(c[1], c[1]))
        w = u * v
        X, Y = x
        np.testing.assert_allclose(w.value, X * Y * (X + Y * Y))
        np.testing.assert_allclose(w.grad, [2 * X * Y + Y**3, X * X + 3 * X * Y * Y])
        np.testing.assert_allclose(w.hess, [[2 * Y, 2 * X + 3 * Y * Y], [2 * X + 3 * Y * Y, 6 * X * Y]])

    def test_operators(self):
        c = coordinates(np.array([0.5, 2.0]))
        a = c[0]
        np.testing.assert_allclose((a + 1.0).value, 1.5)
        np.testing.assert_allclose((1.0 - a).value, 0.5)
        np.testing.assert_allclose((-a).grad, [-1.0, 0.0])
        np.testing.assert_allclose((3.0 * a).grad, [3.0, 0.0])
        np.testing.assert_allclose(jet_scale(a, 2.0).value, 1.0)


class TestSigma3:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal(3)
        for _ in range(20):
            x = rng.standard_normal(3)
            s = w @ x
            if abs(s) < 1e-2:
                continue
            j = jet_sigma3(lift_variable(x, w))
            val, grad, hess = _fd_jet(lambda z: max(w @ z, 0.0) ** 3, x)
            np.testing.assert_allclose(j.value, val, rtol=1e-12)
            np.testing.assert_allclose(j.grad, grad, rtol=1e-6, atol=1e-8)
            np.testing.assert_allclose(j.hess, hess, rtol=1e-4, atol=1e-6)

    def test_vanishes_at_kink(self):
        j = jet_sigma3(lift_variable(np.array([0.0]), [1.0]))
        assert j.value == 0.0
        np.testing.assert_array_equal(j.grad, 0.0)
        np.testing.assert_array_equal(j.hess, 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_one_dimensional_closed_form(self, s, a):
        # sigma3(a x) at x = s/a: derivatives 3a(.)^2, 6a^2(.)
        x = np.array([s])
        j = jet_sigma3(lift_variable(x, [a]))
        z = max(a * s, 0.0)
        np.testing.assert_allclose(j.value, z**3, rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(j.grad, [3 * a * z * z], rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(j.hess, [[6 * a * a * z]], rtol=1e-12, atol=1e-300)


class TestAffine:
    def test_matches_manual(self):
        rng = np.random.default_rng(1)
        X = rng.random((4, 2))
        W = rng.standard_normal((2, 3))
        b = rng.standard_normal(3)
        out = affine(coordinates(X), W, b)
        np.testing.assert_allclose(out.value, X @ W + b)
        for n in range(4):
            np.testing.assert_allclose(out.grad[n], W.T)
        np.testing.assert_array_equal(out.hess, 0.0)

    def test_sparse_weights_agree_with_dense(self):
        from scipy import sparse

        rng = np.random.default_rng(2)
        h = jet_sigma3(affine(coordinates(rng.random((5, 2))), rng.standard_normal((2, 6)), rng.standard_normal(6)))
        W = rng.standard_normal((6, 4)) * (rng.random((6, 4)) < 0.3)
        b = rng.standard_normal(4)
        dense, sp = affine(h, W, b), affine(h, sparse.csr_matrix(W), b)
        np.testing.assert_allclose(sp.value, dense.value, rtol=1e-14)
        np.testing.assert_allclose(sp.grad, dense.grad, rtol=1e-14)
        np.testing.assert_allclose(sp.hess, dense.hess, rtol=1e-14)
