"""Exact sigma_3 gadgets and the spline-to-network compiler."""

from fractions import Fraction

import numpy as np
import pytest
import sympy as sp

from bpinn.compiler import (PRINTED_LINEAR, PRINTED_PRODUCT, PRINTED_SQUARE, CircuitBuilder,
                            compile_spline_network, compile_truncated_power, deepen, derive_gadgets,
                            size_report, solve_linear_gadget, spline_clip, truncated_power_depth,
                            validate_gadget)
from bpinn.network import ClipSpec, forward_jet, forward_raw
from bpinn.spline import SplineCoeffs, SplineSpec, quasi_interpolant, spline_eval


@pytest.fixture(scope="module")
def gadgets():
    return derive_gadgets()


def rel_err(got, ref):
    return float(np.max(np.abs(got - ref) / (1.0 + np.abs(ref))))


class TestGadgets:
    def test_linear_weights_match_symbolic_solution(self):
        z = sp.symbols("z")
        w = sp.symbols("w0:4")
        expr = sp.expand(sum(wi * (z + c) ** 3 for wi, c in zip(w, range(4))) - z)
        sol = sp.solve(sp.Poly(expr, z).coeffs(), w)
        expected = tuple(Fraction(int(sp.fraction(sol[wi])[0]), int(sp.fraction(sol[wi])[1])) for wi in w)
        assert solve_linear_gadget() == expected
        assert expected == (Fraction(1, 3), Fraction(-5, 6), Fraction(2, 3), Fraction(-1, 6))

    def test_linear_gadget_needs_distinct_shifts(self):
        with pytest.raises(ValueError):
            solve_linear_gadget((0, 1, 1, 2))

    def test_derived_gadgets_pass(self, gadgets):
        for name in ("linear", "square", "product", "printed-square"):
            check = gadgets.check(name)
            assert check.passed and check.max_error <= 1e-9

    def test_printed_identities_reported(self, gadgets):
        assert not gadgets.check("printed-linear").passed
        assert not gadgets.check("printed-product").passed
        with pytest.raises(KeyError):
            gadgets.check("cube")

    def test_printed_square_values(self):
        z = np.linspace(0, 10, 101)
        np.testing.assert_allclose(PRINTED_SQUARE(z), z * z, rtol=1e-12, atol=1e-12)

    def test_validate_reports_magnitude_scaled_error(self):
        check = validate_gadget(PRINTED_SQUARE, lambda z: z * z + 1e-3)
        assert not check.passed and check.max_error == pytest.approx(1e-3, rel=1e-6)

    def test_printed_gadgets_shapes(self):
        assert PRINTED_LINEAR.n_inputs == 1 and PRINTED_PRODUCT.n_inputs == 2


class TestBuilder:
    def test_neurons_are_memoized(self, gadgets):
        cb = CircuitBuilder(1, gadgets)
        x = cb.input(0)
        a = cb.sigma3(cb.lincomb([(2.0, x)], 1.0))
        b = cb.sigma3(cb.lincomb([(2.0, x)], 1.0))
        assert a == b and len(cb.layers[0]) == 1

    def test_mixed_layers_rejected(self, gadgets):
        cb = CircuitBuilder(1, gadgets)
        x = cb.input(0)
        h = cb.sigma3(x)
        with pytest.raises(ValueError):
            cb.lincomb([(1.0, x), (1.0, h)])

    def test_product_requires_nonnegative(self, gadgets):
        cb = CircuitBuilder(1, gadgets)
        with pytest.raises(ValueError):
            cb.product(cb.input(0), cb.input(0))

    def test_product_circuit(self, gadgets):
        cb = CircuitBuilder(2, gadgets)
        u = cb.sigma3(cb.input(0))
        v = cb.sigma3(cb.input(1))
        net = cb.to_params(cb.product(u, v))
        X = np.random.default_rng(0).random((50, 2))
        np.testing.assert_allclose(forward_raw(net, X).value, X[:, 0] ** 3 * X[:, 1] ** 3, atol=1e-12)

    def test_transport_preserves_value(self, gadgets):
        cb = CircuitBuilder(1, gadgets)
        h = cb.sigma3(cb.lincomb([(1.0, cb.input(0))], 0.5))
        net = cb.to_params(cb.transport(h))
        assert net.arch.depth == 2
        x = np.linspace(0, 1, 11)[:, None]
        np.testing.assert_allclose(forward_raw(net, x).value, (x[:, 0] + 0.5) ** 3, atol=1e-12)

    def test_constant_output(self, gadgets):
        cb = CircuitBuilder(1, gadgets)
        net = cb.to_params(cb.const(2.5))
        np.testing.assert_allclose(forward_raw(net, np.array([[0.3]])).value, [2.5])


class TestTruncatedPowers:
    @pytest.mark.parametrize("degree", [3, 6, 9, 12])
    def test_values_and_derivatives(self, degree, gadgets):
        net = compile_truncated_power(0.25, degree, gadgets, scale=2.0)
        assert net.arch.depth == truncated_power_depth(degree)
        x = np.linspace(0.3, 1.0, 40)[:, None]
        j = forward_raw(net, x)
        s = 2.0 * (x[:, 0] - 0.25)
        assert rel_err(j.value, s**degree) < 1e-9
        assert rel_err(j.grad[:, 0], 2.0 * degree * s ** (degree - 1)) < 1e-8
        assert rel_err(j.hess[:, 0, 0], 4.0 * degree * (degree - 1) * s ** (degree - 2)) < 1e-8

    def test_zero_left_of_shift(self, gadgets):
        net = compile_truncated_power(0.5, 6, gadgets)
        np.testing.assert_allclose(forward_raw(net, np.array([[0.1], [0.4]])).value, 0.0, atol=1e-12)

    def test_bad_degree(self, gadgets):
        with pytest.raises(ValueError):
            compile_truncated_power(0.0, 4, gadgets)


class TestSplineCompiler:
    @pytest.mark.parametrize("k,l,d", [(4, 2, 1), (4, 5, 1), (7, 3, 1), (4, 3, 2), (7, 2, 2)])
    def test_exact_against_spline(self, k, l, d, gadgets):
        spec = SplineSpec(k, l, d)
        rng = np.random.default_rng(k * 100 + l * 10 + d)
        coeffs = SplineCoeffs(spec, rng.uniform(-1, 1, (spec.n_basis,) * d))
        net = compile_spline_network(coeffs, gadgets)
        X = rng.random((200, d))
        ref = spline_eval(coeffs, X)
        got = forward_jet(net, spline_clip(coeffs), X)
        assert rel_err(got.value, ref.value) < 1e-9
        assert rel_err(got.grad, ref.grad) < 1e-8
        assert rel_err(got.hess, ref.hess) < 1e-8

    def test_interpolant_of_smooth_function(self, gadgets):
        coeffs = quasi_interpolant(lambda X: np.sin(3 * X[:, 0]) * X[:, 1], SplineSpec(4, 4, 2))
        net = compile_spline_network(coeffs, gadgets)
        X = np.random.default_rng(1).random((100, 2))
        np.testing.assert_allclose(forward_raw(net, X).value, spline_eval(coeffs, X).value, atol=1e-10)

    def test_rejects_uncompilable_order(self, gadgets):
        with pytest.raises(ValueError):
            compile_spline_network(SplineCoeffs(SplineSpec(3, 2), np.zeros(4)), gadgets)

    def test_rejects_small_clip(self, gadgets):
        coeffs = SplineCoeffs(SplineSpec(4, 2), np.full(5, 3.0))
        with pytest.raises(ValueError):
            compile_spline_network(coeffs, gadgets, ClipSpec.standard(2.0))

    def test_zero_spline(self, gadgets):
        net = compile_spline_network(SplineCoeffs(SplineSpec(4, 2), np.zeros(5)), gadgets)
        np.testing.assert_allclose(forward_raw(net, np.array([[0.4]])).value, [0.0])


class TestDeepen:
    def test_function_preserved(self, gadgets):
        coeffs = quasi_interpolant(lambda X: np.cos(2 * X[:, 0]), SplineSpec(4, 4))
        net = compile_spline_network(coeffs, gadgets)
        deep = deepen(net, 3, gadgets)
        assert deep.arch.depth == 3
        x = np.random.default_rng(0).random((100, 1))
        a, b = forward_raw(net, x), forward_raw(deep, x)
        np.testing.assert_allclose(b.value, a.value, atol=1e-9)
        np.testing.assert_allclose(b.hess, a.hess, atol=1e-7)

    def test_cannot_shrink(self, gadgets):
        net = compile_truncated_power(0.0, 6, gadgets)
        with pytest.raises(ValueError):
            deepen(net, 1, gadgets)


class TestSizeReport:
    def test_sparsity_doubles_in_one_dimension(self, gadgets):
        sizes = []
        for l in (16, 32):
            spec = SplineSpec(4, l)
            net = compile_spline_network(SplineCoeffs(spec, np.ones(spec.n_basis)), gadgets)
            sizes.append(size_report(net, spec, beta=4.0))
        assert sizes[1].sparsity / sizes[0].sparsity == pytest.approx(2.0, rel=0.2)
        assert set(sizes[0].as_dict()) >= {"depth", "width", "sparsity", "max_weight"}
