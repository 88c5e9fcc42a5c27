"""Sparse sigma_3 networks: layout, serialization, cutoff and forward jets."""

import json

import numpy as np
import pytest

from bpinn.network import (Architecture, ClipSpec, NetworkParams, clip_eval, count_params,
                           forward_jet, forward_raw, pad_to_width, parameter_lipschitz_estimate,
                           parameter_lipschitz_estimate_lemma, uniform_param_count)
from bpinn.jet import lift_variable


def random_params(d, widths, density=0.7, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    T = count_params(d, widths)
    theta = rng.uniform(-scale, scale, T) * (rng.random(T) < density)
    return NetworkParams.from_dense(d, widths, theta, bound=scale)


def manual_forward(params, x):
    h = np.asarray(x, dtype=float)
    layers = list(params.layers())
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0) ** 3
    W, b = layers[-1]
    return (h @ W + b)[..., 0]


class TestLayout:
    @pytest.mark.parametrize("d,W,L", [(1, 1, 1), (2, 3, 2), (3, 5, 3)])
    def test_uniform_count(self, d, W, L):
        assert uniform_param_count(d, W, L) == count_params(d, (W,) * L)
        assert uniform_param_count(d, W, L) == d * W + W + (L - 1) * (W * W + W) + W + 1

    def test_layer_major_row_major(self):
        # d=2, widths (3,): W1 is 2x3 row-major, then b1, then W2 (3x1), then b2
        theta = np.arange(1, 14, dtype=float)
        p = NetworkParams.from_dense(2, (3,), theta, bound=20.0)
        (W1, b1), (W2, b2) = p.layers()
        np.testing.assert_array_equal(W1, [[1, 2, 3], [4, 5, 6]])
        np.testing.assert_array_equal(b1, [7, 8, 9])
        np.testing.assert_array_equal(W2[:, 0], [10, 11, 12])
        np.testing.assert_array_equal(b2, [13])

    def test_neuron_param_indices(self):
        arch = Architecture.uniform(2, 3, 2)
        idx = arch.neuron_param_indices(0, 1)
        # incoming W1[:,1], bias b1[1], outgoing W2[1,:]
        np.testing.assert_array_equal(idx, [1, 4, 7, 9 + 3, 9 + 4, 9 + 5])

    def test_invalid(self):
        with pytest.raises(ValueError):
            Architecture(1, (0,), np.zeros(2, bool))
        with pytest.raises(ValueError):
            Architecture(1, (2,), np.zeros(3, bool))
        arch = Architecture.uniform(1, 2, 1)
        with pytest.raises(ValueError):
            NetworkParams(arch, np.ones(arch.n_params), bound=0.5)
        with pytest.raises(ValueError):
            NetworkParams(Architecture.uniform(1, 2, 1, np.zeros(7, bool)), np.ones(7), bound=2.0)


class TestSerialization:
    def test_round_trip(self):
        p = random_params(2, (4, 3), density=0.4, seed=3)
        q = NetworkParams.from_json(p.to_json())
        np.testing.assert_array_equal(q.theta, p.theta)
        np.testing.assert_array_equal(q.arch.gamma, p.arch.gamma)
        assert q.arch.widths == p.arch.widths and q.bound == p.bound

    def test_document_fields(self):
        doc = json.loads(random_params(1, (2,)).to_json())
        assert set(doc) == {"L", "d", "widths", "gamma", "theta", "B"}

    def test_depth_mismatch(self):
        doc = random_params(1, (2,)).to_dict()
        doc["L"] = 2
        with pytest.raises(ValueError):
            NetworkParams.from_dict(doc)


class TestPadding:
    def test_pad_preserves_function(self):
        p = random_params(2, (3, 3), seed=5)
        q = pad_to_width(p, 6)
        assert q.arch.widths == (6, 6) and q.arch.sparsity == p.arch.sparsity
        X = np.random.default_rng(0).random((20, 2))
        np.testing.assert_allclose(forward_raw(q, X).value, forward_raw(p, X).value, rtol=1e-13)

    def test_pad_down_rejected(self):
        with pytest.raises(ValueError):
            pad_to_width(random_params(1, (3,)), 2)


class TestClip:
    def test_standard_passes_check(self):
        ClipSpec.standard(3.0).check()

    def test_identity_and_saturation(self):
        clip = ClipSpec.standard(1.0)
        x = np.linspace(-3, 3, 6001)
        j = clip_eval(clip, lift_variable(x[:, None], [1.0]))
        inner = np.abs(x) < 1
        np.testing.assert_allclose(j.value[inner], x[inner], atol=1e-12)
        np.testing.assert_allclose(j.value[x >= 2], 2.0, atol=1e-12)
        np.testing.assert_allclose(j.value[x <= -2], -2.0, atol=1e-12)
        assert np.all(np.diff(j.value) >= -1e-12)

    def test_scale(self):
        clip = ClipSpec.standard(5.0)
        j = clip_eval(clip, lift_variable(np.array([[4.0], [12.0]]), [1.0]))
        np.testing.assert_allclose(j.value, [4.0, 10.0], atol=1e-11)

    def test_broken_clip_detected(self):
        c = ClipSpec.standard()
        bad = ClipSpec(c.knots, (c.weights[0] + 0.1,) + c.weights[1:], c.bias, c.scale)
        with pytest.raises(ValueError):
            bad.check()


class TestForward:
    @pytest.mark.parametrize("d,widths", [(1, (3,)), (2, (4, 4)), (2, (3, 5, 2))])
    def test_value_matches_manual(self, d, widths):
        p = random_params(d, widths, seed=sum(widths))
        X = np.random.default_rng(1).random((30, d))
        np.testing.assert_allclose(forward_raw(p, X).value, manual_forward(p, X), rtol=1e-12)

    def test_single_point(self):
        p = random_params(2, (3,))
        j = forward_raw(p, np.array([0.2, 0.4]))
        assert j.shape == () and j.grad.shape == (2,)

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            forward_raw(random_params(2, (3,)), np.zeros((4, 3)))

    def test_chunked_evaluation_matches(self):
        # wide enough that the batch is split into several chunks
        p = random_params(2, (400,), density=0.5, seed=9, scale=0.3)
        X = np.random.default_rng(2).random((3000, 2))
        full = forward_raw(p, X)
        np.testing.assert_allclose(full.value[:50], forward_raw(p, X[:50]).value, rtol=1e-12)
        np.testing.assert_allclose(full.hess[-50:], forward_raw(p, X[-50:]).hess, rtol=1e-12)

    def test_clip_composition(self):
        p = random_params(1, (3,), seed=4, scale=2.0)
        X = np.linspace(0, 1, 11)[:, None]
        np.testing.assert_allclose(forward_jet(p, ClipSpec.standard(10.0), X).value,
                                   forward_raw(p, X).value, rtol=1e-10)


class TestLipschitzEnvelope:
    def test_monotone_and_ordered(self):
        a1 = Architecture.uniform(2, 3, 2)
        a2 = Architecture.uniform(2, 4, 2)
        assert parameter_lipschitz_estimate(a2, 2.0, 2) > parameter_lipschitz_estimate(a1, 2.0, 2)
        assert parameter_lipschitz_estimate(a1, 3.0, 2) > parameter_lipschitz_estimate(a1, 2.5, 2)
        assert parameter_lipschitz_estimate(a1, 2.0, 2) >= parameter_lipschitz_estimate_lemma(a1, 2.0, 2)

    def test_exponents(self):
        arch = Architecture.uniform(1, 2, 1)
        # L = 1: W^1 * max(B, d)^7 and W^0 * max(B, d)^2
        assert parameter_lipschitz_estimate(arch, 3.0, 1) == pytest.approx(2 * 3.0**7)
        assert parameter_lipschitz_estimate_lemma(arch, 3.0, 1) == pytest.approx(3.0**2)
        with pytest.raises(ValueError):
            parameter_lipschitz_estimate(arch, 0.0, 1)
