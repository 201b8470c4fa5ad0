import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import llflow.tensor as T
from llflow.tensor import Tensor

from conftest import fd_grad


class TestElementwise:
    def test_add(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_exp_identity(self):
        assert T.exp(Tensor([0.0])).data[0] == 1.0

    def test_max_pair(self):
        out = T.maximum(Tensor([1.0, 5.0]), Tensor([4.0, 2.0]))
        np.testing.assert_array_equal(out.data, [4.0, 5.0])

    def test_div_by_zero_raises(self):
        with pytest.raises(ZeroDivisionError):
            T.div(Tensor([1.0]), Tensor([0.0]))

    def test_log_nonpositive_raises(self):
        with pytest.raises(ValueError):
            T.log(Tensor([0.0, 1.0]))

    def test_broadcasting_never_aliases(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.full((1, 3), 2.0))
        out = T.mul(a, b)
        out.data[...] = -1.0
        np.testing.assert_array_equal(a.data, np.ones((2, 3)))
        np.testing.assert_array_equal(b.data, np.full((1, 3), 2.0))


class TestConv2d:
    def test_all_ones_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k, stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        k = np.zeros((3, 3, 1, 1))
        for c in range(3):
            k[c, c, 0, 0] = 1.0
        out = T.conv2d(x, Tensor(k))
        np.testing.assert_allclose(out.data, x.data)

    def test_matches_quadruple_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 1, 4, 4))
        k = rng.normal(size=(2, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=1, padding=1).data
        # brute-force direct convolution
        expected = np.zeros((1, 2, 4, 4))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(2):
            for i in range(4):
                for j in range(4):
                    acc = 0.0
                    for di in range(3):
                        for dj in range(3):
                            acc += xp[0, 0, i + di, j + dj] * k[o, 0, di, dj]
                    expected[0, o, i, j] = acc
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_negative_extent_raises(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestReduce:
    def test_channel_mean_pixel(self):
        x = Tensor(np.array([0.2, 0.4, 0.6]).reshape(1, 3, 1, 1))
        out = T.channel_mean(x)
        assert out.shape == (1, 1, 1, 1)
        np.testing.assert_allclose(out.data[0, 0, 0, 0], 0.4)

    def test_sum_zeros(self):
        assert T.reduce_sum(Tensor(np.zeros((4, 5)))).data == 0.0

    def test_mean_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        acc = 0.0
        for i in range(3):
            for j in range(5):
                acc += x[i, j]
        np.testing.assert_allclose(T.reduce_mean(Tensor(x)).data, acc / 15, rtol=1e-12)

    def test_empty_axes_raises(self):
        with pytest.raises(ValueError):
            T.reduce_sum(Tensor(np.ones(3)), axes=())

    def test_reduce_then_expand_roundtrips_shape(self):
        x = Tensor(np.ones((2, 3, 4)))
        r = T.reduce_sum(x, axes=(1,), keepdims=True)
        assert np.broadcast_to(r.data, x.shape).shape == x.shape


class TestSpatialGradient:
    def test_constant_is_zero(self):
        out = T.spatial_gradient(Tensor(np.full((1, 1, 4, 4), 3.0)), "x")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_ramp(self):
        x = Tensor(np.array([[0.0, 1.0, 2.0]]).reshape(1, 1, 1, 3))
        out = T.spatial_gradient(x, "x")
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 1.0, 0.0])

    def test_matches_difference_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 1, 4, 4))
        gy = T.spatial_gradient(Tensor(x), "y").data
        expected = np.zeros_like(x)
        for i in range(3):
            for j in range(4):
                expected[0, 0, i, j] = x[0, 0, i + 1, j] - x[0, 0, i, j]
        np.testing.assert_allclose(gy, expected)

    def test_extent_one_raises(self):
        with pytest.raises(ValueError):
            T.spatial_gradient(Tensor(np.ones((1, 1, 1, 3))), "y")


class TestBackward:
    def test_quadratic(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.reduce_sum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_constant_has_zero_grad(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([5.0]), requires_grad=True)
        T.backward(T.reduce_sum(x * x) + 0.0 * T.reduce_sum(y))
        np.testing.assert_array_equal(y.grad, [0.0])

    def test_non_scalar_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(x * 2.0)

    def test_detached_raises(self):
        with pytest.raises(ValueError):
            T.backward(Tensor(np.array(1.0)))

    def test_three_layer_composition_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(6,)), requires_grad=True)
        w1 = Tensor(rng.normal(size=(6,)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(6,)), requires_grad=True)

        def forward():
            h1 = T.tanh(x * w1)
            h2 = T.sigmoid(h1 + w2)
            return float(T.reduce_sum(T.exp(0.5 * h2) * h1).data)

        loss = T.reduce_sum(T.exp(0.5 * T.sigmoid(T.tanh(x * w1) + w2)) * T.tanh(x * w1))
        T.backward(loss)
        for leaf in (x, w1, w2):
            for i in range(6):
                fd = fd_grad(forward, leaf.data, i, step=1e-4)
                rel = abs(fd - leaf.grad[i]) / max(abs(fd), 1e-10)
                assert rel < 1e-3

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        T.backward(T.reduce_sum(x * x + x))
        np.testing.assert_allclose(x.grad, [7.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_elementwise_grads_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4,)) + 3.0, requires_grad=True)
    b = Tensor(rng.normal(size=(4,)) + 3.0, requires_grad=True)

    def scalar():
        out = T.log(a) * T.sigmoid(b) + T.absolute(a - b) + a / b
        return float(T.reduce_sum(out).data)

    loss = T.reduce_sum(T.log(a) * T.sigmoid(b) + T.absolute(a - b) + a / b)
    T.backward(loss)
    for leaf in (a, b):
        for i in range(4):
            fd = fd_grad(scalar, leaf.data, i, step=1e-6)
            assert abs(fd - leaf.grad[i]) / max(abs(fd), 1e-8) < 1e-3


def test_channel_mix_and_inverse_grads():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(3, 3)) + np.eye(3) * 2, requires_grad=True)
    x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)

    np.testing.assert_allclose(
        T.channel_mix_inverse(w, T.channel_mix(w, x)).data, x.data, atol=1e-10)

    def scalar():
        return float(T.reduce_sum(T.channel_mix_inverse(w, x)).data)

    T.backward(T.reduce_sum(T.channel_mix_inverse(w, x)))
    for leaf in (w, x):
        flat = leaf.data.reshape(-1)
        for i in range(0, flat.size, 3):
            fd = fd_grad(scalar, leaf.data, i, step=1e-6)
            assert abs(fd - leaf.grad.reshape(-1)[i]) / max(abs(fd), 1e-8) < 1e-4


def test_logabsdet_matches_numpy_and_grad():
    rng = np.random.default_rng(6)
    w = Tensor(rng.normal(size=(4, 4)) + np.eye(4) * 3, requires_grad=True)
    out = T.logabsdet(w)
    np.testing.assert_allclose(float(out.data), np.linalg.slogdet(w.data)[1])
    T.backward(out)
    np.testing.assert_allclose(w.grad, np.linalg.inv(w.data).T, atol=1e-10)
