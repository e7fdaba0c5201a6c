import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfonn_kit import ops
from reference import (conv2d_valid_loops, conv2d_backward_input_loops,
                       conv2d_backward_weights_loops, maxpool2x2_loops,
                       central_difference, relative_error)


def rng(seed=0):
    return np.random.default_rng(seed)


# Shared strategy for small convolution cases.
conv_cases = st.tuples(
    st.integers(1, 3),   # cin
    st.integers(1, 3),   # cout
    st.integers(1, 3),   # kh
    st.integers(1, 3),   # kw
    st.integers(0, 4),   # extra rows beyond kh
    st.integers(0, 4),   # extra cols beyond kw
    st.integers(0, 2 ** 31 - 1),
)


class TestAsTensor:
    def test_converts_and_checks_shape(self):
        t = ops.as_tensor([[1, 2], [3, 4]], shape=(2, 2))
        assert t.dtype == np.float64
        assert t[1, 0] == 3.0

    def test_shape_mismatch(self):
        with pytest.raises(ops.DimensionError):
            ops.as_tensor([1.0, 2.0], shape=(3,))

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            ops.as_tensor([1.0, bad])


class TestConvForward:
    def test_identity_kernel(self):
        x = rng(1).standard_normal((1, 4, 5))
        k = np.ones((1, 1, 1, 1))
        assert np.array_equal(ops.conv2d_valid(x, k), x)

    def test_hand_case(self):
        # 2x2 mean kernel over a 3x3 ramp
        x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
        k = np.full((1, 1, 2, 2), 0.25)
        out = ops.conv2d_valid(x, k)
        assert out.shape == (1, 2, 2)
        assert np.allclose(out[0], [[2.0, 3.0], [5.0, 6.0]])

    def test_bias_broadcast(self):
        x = rng(2).standard_normal((2, 5, 5))
        k = rng(3).standard_normal((3, 2, 2, 2))
        b = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(ops.conv2d_valid(x, k, b),
                              ops.conv2d_valid(x, k) + b[:, None, None])

    @settings(max_examples=40, deadline=None)
    @given(conv_cases)
    def test_matches_loop_oracle(self, case):
        cin, cout, kh, kw, eh, ew, seed = case
        r = rng(seed)
        x = r.standard_normal((cin, kh + eh, kw + ew))
        k = r.standard_normal((cout, cin, kh, kw))
        b = r.standard_normal(cout)
        got = ops.conv2d_valid(x, k, b)
        want = conv2d_valid_loops(x, k, b)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_shape_errors_name_both_shapes(self):
        x = rng(0).standard_normal((2, 4, 4))
        k = rng(0).standard_normal((1, 3, 2, 2))
        with pytest.raises(ops.DimensionError, match=r"\(2, 4, 4\).*\(1, 3, 2, 2\)"):
            ops.conv2d_valid(x, k)

    def test_kernel_too_large(self):
        with pytest.raises(ops.DimensionError):
            ops.conv2d_valid(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)))


class TestConvBackward:
    @settings(max_examples=40, deadline=None)
    @given(conv_cases)
    def test_weights_matches_loop_oracle(self, case):
        cin, cout, kh, kw, eh, ew, seed = case
        r = rng(seed)
        x = r.standard_normal((cin, kh + eh, kw + ew))
        g = r.standard_normal((cout, eh + 1, ew + 1))
        got = ops.conv2d_backward_weights(x, g)
        assert got.shape == (cout, cin, kh, kw)
        assert np.allclose(got, conv2d_backward_weights_loops(x, g),
                           rtol=1e-12, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(conv_cases)
    def test_input_matches_loop_oracle(self, case):
        cin, cout, kh, kw, eh, ew, seed = case
        r = rng(seed)
        k = r.standard_normal((cout, cin, kh, kw))
        g = r.standard_normal((cout, eh + 1, ew + 1))
        got = ops.conv2d_backward_input(k, g)
        assert got.shape == (cin, kh + eh, kw + ew)
        assert np.allclose(got, conv2d_backward_input_loops(k, g),
                           rtol=1e-12, atol=1e-12)

    def test_adjoint_identity(self):
        # <conv(x), g> == <x, conv_input_adjoint(g)> for random tensors
        r = rng(17)
        x = r.standard_normal((2, 6, 7))
        k = r.standard_normal((3, 2, 3, 2))
        g = r.standard_normal((3, 4, 6))
        lhs = np.sum(ops.conv2d_valid(x, k) * g)
        rhs = np.sum(x * ops.conv2d_backward_input(k, g))
        assert np.isclose(lhs, rhs, rtol=1e-12)
        mid = np.sum(k * ops.conv2d_backward_weights(x, g))
        assert np.isclose(lhs, mid, rtol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ops.DimensionError):
            ops.conv2d_backward_input(np.zeros((2, 1, 2, 2)), np.zeros((3, 4, 4)))


class TestElementwisePow:
    def test_first_power_is_copy(self):
        t = rng(0).standard_normal((2, 3))
        out = ops.elementwise_pow(t, 1)
        assert np.array_equal(out, t)
        out[0, 0] = 99.0
        assert t[0, 0] != 99.0

    def test_cube(self):
        t = np.array([-2.0, 0.5, 3.0])
        assert np.array_equal(ops.elementwise_pow(t, 3), t * t * t)

    @pytest.mark.parametrize("q", [0, -1, -5])
    def test_rejects_non_positive(self, q):
        with pytest.raises(ValueError, match="positive integer"):
            ops.elementwise_pow(np.ones(3), q)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
    def test_matches_numpy_power(self, q, seed):
        t = rng(seed).uniform(-2, 2, size=(3, 4))
        assert np.allclose(ops.elementwise_pow(t, q), np.power(t, q), rtol=1e-14)


class TestTanh:
    def test_range_and_odd_symmetry(self):
        t = rng(3).standard_normal((4, 4)) * 5
        a = ops.tanh_forward(t)
        assert np.all(np.abs(a) < 1.0)
        assert np.allclose(ops.tanh_forward(-t), -a)

    def test_backward_matches_finite_difference(self):
        t = rng(4).standard_normal(20)
        a = ops.tanh_forward(t)
        g = rng(5).standard_normal(20)
        got = ops.tanh_backward(a, g)
        for i in range(20):
            num = central_difference(lambda: float(np.sum(np.tanh(t) * g)), t, i)
            assert relative_error(got[i], num) < 1e-7


class TestMaxPool:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 3), st.integers(2, 7), st.integers(2, 7),
           st.integers(0, 2 ** 31 - 1), st.booleans())
    def test_matches_loop_oracle(self, c, h, w, seed, quantize):
        r = rng(seed)
        x = r.standard_normal((c, h, w))
        if quantize:
            x = np.round(x)  # force plenty of ties
        pooled, idx = ops.maxpool2x2(x)
        want_p, want_i = maxpool2x2_loops(x)
        assert np.array_equal(pooled, want_p)
        assert np.array_equal(idx, want_i)

    def test_odd_edges_dropped(self):
        x = np.arange(15, dtype=np.float64).reshape(1, 3, 5)
        pooled, _ = ops.maxpool2x2(x)
        assert pooled.shape == (1, 1, 2)
        assert np.array_equal(pooled[0], [[6.0, 8.0]])

    def test_too_small(self):
        with pytest.raises(ops.DimensionError):
            ops.maxpool2x2(np.zeros((1, 1, 4)))

    def test_backward_scatters_to_argmax(self):
        x = rng(8).standard_normal((2, 6, 6))
        pooled, idx = ops.maxpool2x2(x)
        g = rng(9).standard_normal(pooled.shape)
        back = ops.maxpool2x2_backward(g, idx, x.shape)
        assert back.shape == x.shape
        assert np.isclose(back.sum(), g.sum())
        # Every gradient entry lands exactly on its window's argmax.
        flat = back.ravel()
        assert np.array_equal(flat[idx.ravel()], g.ravel())
        nonzero = np.flatnonzero(flat)
        assert set(nonzero) <= set(idx.ravel())

    def test_backward_rejects_mismatch(self):
        x = rng(8).standard_normal((1, 4, 4))
        pooled, idx = ops.maxpool2x2(x)
        with pytest.raises(ops.ConsistencyError):
            ops.maxpool2x2_backward(np.zeros((1, 3, 2)), idx, x.shape)
        with pytest.raises(ops.ConsistencyError):
            ops.maxpool2x2_backward(np.zeros(pooled.shape), idx, (1, 2, 2))


class TestDense:
    def test_forward_is_affine(self):
        r = rng(11)
        w = r.standard_normal((3, 5))
        b = r.standard_normal(3)
        x = r.standard_normal(5)
        assert np.allclose(ops.dense_forward(x, w, b), w @ x + b)

    def test_backward_finite_difference(self):
        r = rng(12)
        w = r.standard_normal((3, 4))
        b = r.standard_normal(3)
        x = r.standard_normal(4)
        g = r.standard_normal(3)
        gx, gw, gb = ops.dense_backward(x, w, g)

        def loss():
            return float(np.sum(ops.dense_forward(x, w, b) * g))

        for i in range(4):
            assert relative_error(gx[i], central_difference(loss, x, i)) < 1e-7
        flat_w = w.reshape(-1)
        for i in range(flat_w.size):
            assert relative_error(gw.reshape(-1)[i],
                                  central_difference(loss, flat_w, i)) < 1e-7
        for i in range(3):
            assert relative_error(gb[i], central_difference(loss, b, i)) < 1e-7

    def test_shape_errors(self):
        with pytest.raises(ops.DimensionError):
            ops.dense_forward(np.zeros(4), np.zeros((3, 5)), np.zeros(3))
        with pytest.raises(ops.DimensionError):
            ops.dense_forward(np.zeros(5), np.zeros((3, 5)), np.zeros(2))


class TestSoftmaxCrossEntropy:
    def test_frozen_softmax_values(self):
        got = ops.softmax(np.array([1.0, 2.0, 3.0]))
        want = np.array([0.09003057317038046,
                         0.24472847105479764,
                         0.6652409557748219])
        assert np.allclose(got, want, atol=1e-15)

    def test_shift_invariance_and_sum(self):
        r = rng(13)
        z = r.standard_normal(5) * 10
        p = ops.softmax(z)
        assert np.isclose(p.sum(), 1.0)
        assert np.allclose(ops.softmax(z + 123.0), p, atol=1e-15)

    def test_extreme_logits_stay_finite(self):
        p = ops.softmax(np.array([1e4, -1e4, 0.0]))
        assert np.all(np.isfinite(p))
        assert np.isclose(p[0], 1.0)

    def test_uniform_logits_loss_is_log_k(self):
        loss, grad = ops.cross_entropy_with_softmax(np.zeros(3), 1)
        assert np.isclose(loss, 1.0986122886681098, atol=1e-15)
        assert np.allclose(grad, [1 / 3, -2 / 3, 1 / 3])

    def test_gradient_matches_finite_difference(self):
        z = rng(14).standard_normal(4)
        _, grad = ops.cross_entropy_with_softmax(z, 2)
        for i in range(4):
            num = central_difference(
                lambda: ops.cross_entropy_with_softmax(z, 2)[0], z, i)
            assert relative_error(grad[i], num) < 1e-7

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            ops.cross_entropy_with_softmax(np.zeros(3), 3)
        with pytest.raises(ValueError):
            ops.cross_entropy_with_softmax(np.zeros(3), -1)

    def test_needs_two_classes(self):
        with pytest.raises(ops.DimensionError):
            ops.softmax(np.array([1.0]))
