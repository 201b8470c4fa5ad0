import math

import numpy as np
import pytest

import llflow.flow as F
import llflow.tensor as T
from llflow.diagnostics import flow_jacobian, random_cond_feats, small_config
from llflow.model import random_model
from llflow.tensor import Tensor

SIG2 = 1.0 / (1.0 + math.exp(-2.0)) + 0.5  # coupling scale at zero raw output


class TestSqueeze:
    def test_documented_order(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = F.squeeze(x)
        assert out.shape == (1, 4, 1, 1)
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 2.0, 3.0, 4.0])

    def test_roundtrip_bit_exact(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 6))
        back = F.unsqueeze(F.squeeze(Tensor(x))).data
        np.testing.assert_array_equal(back, x)

    def test_multiset_preserved(self):
        x = np.random.default_rng(1).normal(size=(1, 2, 4, 4))
        out = F.squeeze(Tensor(x)).data
        np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(x.ravel()))

    def test_odd_extent_raises(self):
        with pytest.raises(ValueError):
            F.squeeze(Tensor(np.zeros((1, 1, 3, 4))))


class TestActNorm:
    def test_identity_params(self):
        norm = F.ActNorm(2, dtype=np.float64)
        x = Tensor(np.random.default_rng(2).normal(size=(1, 2, 3, 3)))
        out, logdet = norm.forward(x)
        np.testing.assert_allclose(out.data, x.data)
        assert float(logdet.data) == 0.0

    def test_scale_two_logdet(self):
        norm = F.ActNorm(1, dtype=np.float64)
        norm.log_scale.data[...] = math.log(2.0)
        x = Tensor(np.ones((1, 1, 2, 2)))
        _, logdet = norm.forward(x)
        np.testing.assert_allclose(float(logdet.data), 4 * math.log(2), rtol=1e-12)

    def test_data_dependent_init(self):
        rng = np.random.default_rng(3)
        norm = F.ActNorm(4, dtype=np.float64)
        x = Tensor(rng.normal(1.5, 2.0, size=(8, 4, 6, 6)))
        norm.init_from_data(x)
        out, _ = norm.forward(x)
        means = out.data.mean(axis=(0, 2, 3))
        variances = out.data.var(axis=(0, 2, 3))
        assert np.abs(means).max() < 1e-4
        assert np.abs(variances - 1).max() < 1e-3

    def test_inverse(self):
        rng = np.random.default_rng(4)
        norm = F.ActNorm(3, dtype=np.float64)
        norm.log_scale.data[...] = rng.normal(size=norm.log_scale.shape)
        norm.bias.data[...] = rng.normal(size=norm.bias.shape)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y, _ = norm.forward(x)
        np.testing.assert_allclose(norm.inverse(y).data, x.data, atol=1e-12)


class TestInv1x1:
    def test_identity_matrix(self):
        layer = F.Inv1x1(np.random.default_rng(5), 3, dtype=np.float64)
        layer.weight.data[...] = np.eye(3)
        x = Tensor(np.random.default_rng(6).normal(size=(1, 3, 2, 2)))
        out, logdet = layer.forward(x)
        np.testing.assert_allclose(out.data, x.data)
        np.testing.assert_allclose(float(logdet.data), 0.0, atol=1e-12)

    def test_swap_matrix(self):
        layer = F.Inv1x1(np.random.default_rng(7), 2, dtype=np.float64)
        layer.weight.data[...] = [[0.0, 1.0], [1.0, 0.0]]
        x = Tensor(np.random.default_rng(8).normal(size=(1, 2, 2, 2)))
        out, logdet = layer.forward(x)
        np.testing.assert_array_equal(out.data[:, 0], x.data[:, 1])
        np.testing.assert_array_equal(out.data[:, 1], x.data[:, 0])
        np.testing.assert_allclose(float(logdet.data), 0.0, atol=1e-12)

    def test_logdet_matches_dense_jacobian(self):
        rng = np.random.default_rng(9)
        layer = F.Inv1x1(rng, 3, dtype=np.float64)
        w = rng.normal(size=(3, 3)) + 2 * np.eye(3)
        layer.weight.data[...] = w
        x = rng.normal(size=(3, 2, 2))
        xt = Tensor(x[None], requires_grad=True)
        out, logdet = layer.forward(xt)
        np.testing.assert_allclose(float(logdet.data), 4 * math.log(abs(np.linalg.det(w))),
                                   rtol=1e-10)
        d = x.size
        jac = np.zeros((d, d))
        flat = T.reshape(out, (d,))
        for i in range(d):
            xt.grad = None
            T.backward(flat[i])
            jac[i] = xt.grad.reshape(d)
        np.testing.assert_allclose(float(logdet.data), np.linalg.slogdet(jac)[1], atol=1e-6)

    def test_singular_raises(self):
        layer = F.Inv1x1(np.random.default_rng(10), 2, dtype=np.float64)
        layer.weight.data[...] = [[1.0, 1.0], [1.0, 1.0]]
        with pytest.raises(np.linalg.LinAlgError):
            layer.forward(Tensor(np.ones((1, 2, 2, 2))))


class TestCoupling:
    def _coupling(self, channels=4, cond=3, seed=11):
        return F.CondAffineCoupling(np.random.default_rng(seed), channels, cond, 8,
                                    dtype=np.float64)

    def test_zero_weights_constant_scale(self):
        cp = self._coupling()
        for conv in (cp.conv1, cp.conv2, cp.conv3):
            conv.w.data[...] = 0
            conv.b.data[...] = 0
        h = Tensor(np.random.default_rng(12).normal(size=(1, 4, 2, 2)))
        cond = Tensor(np.random.default_rng(13).normal(size=(1, 3, 2, 2)))
        out, logdet = cp.forward(h, cond)
        np.testing.assert_array_equal(out.data[:, :2], h.data[:, :2])
        np.testing.assert_allclose(out.data[:, 2:], SIG2 * h.data[:, 2:], rtol=1e-12)
        np.testing.assert_allclose(float(logdet.data[0]), 8 * math.log(SIG2), rtol=1e-12)

    def test_inverse_roundtrip(self):
        cp = self._coupling()
        rng = np.random.default_rng(14)
        h = Tensor(rng.normal(size=(2, 4, 4, 4)))
        cond = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y, _ = cp.forward(h, cond)
        np.testing.assert_allclose(cp.inverse(y, cond).data, h.data, atol=1e-10)

    def test_logdet_matches_dense_jacobian(self):
        cp = self._coupling()
        cp.conv3.w.data[...] = np.random.default_rng(15).normal(0, 0.3, cp.conv3.w.shape)
        rng = np.random.default_rng(16)
        x = rng.normal(size=(4, 2, 2))
        cond = Tensor(rng.normal(size=(1, 3, 2, 2)))
        xt = Tensor(x[None], requires_grad=True)
        out, logdet = cp.forward(xt, cond)
        d = x.size
        jac = np.zeros((d, d))
        flat = T.reshape(out, (d,))
        for i in range(d):
            for p in _all_nodes(flat):
                p.grad = None
            T.backward(flat[i])
            jac[i] = xt.grad.reshape(d)
        np.testing.assert_allclose(float(logdet.data[0]), np.linalg.slogdet(jac)[1],
                                   rtol=1e-8)

    def test_cond_shape_mismatch_raises(self):
        cp = self._coupling()
        with pytest.raises(ValueError):
            cp.forward(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))


def _all_nodes(node):
    seen = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        yield n
        stack.extend(n._parents)


class TestFlowModel:
    def test_identity_params_closed_form(self):
        cfg = small_config(levels=1, steps=2)
        model = random_model(cfg, np.random.default_rng(17))
        for step in model.flow.level_steps[0]:
            step.actnorm.log_scale.data[...] = 0
            step.actnorm.bias.data[...] = 0
            step.inv1x1.weight.data[...] = np.eye(12)
            for conv in (step.coupling.conv1, step.coupling.conv2, step.coupling.conv3):
                conv.w.data[...] = 0
                conv.b.data[...] = 0
        rng = np.random.default_rng(18)
        x = rng.normal(size=(1, 3, 4, 4))
        feats = random_cond_feats(rng, 1, 1, cfg.model.width, 4, 4)
        z, logdet = model.flow.forward(Tensor(x), feats)
        sq = F.squeeze(Tensor(x)).data
        np.testing.assert_allclose(z.data[:, :6], sq[:, :6], atol=1e-12)
        np.testing.assert_allclose(z.data[:, 6:], SIG2 ** 2 * sq[:, 6:], rtol=1e-12)
        # only the couplings contribute: 6 channels * 4 pixels per step
        np.testing.assert_allclose(float(logdet.data[0]), 2 * 24 * math.log(SIG2), rtol=1e-12)

    def test_roundtrip_random_params(self):
        cfg = small_config(levels=2, steps=2)
        rng = np.random.default_rng(19)
        model = random_model(cfg, rng)
        x = rng.normal(size=(2, 3, 8, 8))
        feats = random_cond_feats(rng, 2, 2, cfg.model.width, 8, 8)
        with T.no_grad():
            z, _ = model.flow.forward(Tensor(x), feats)
            back = model.flow.inverse(z, feats).data
        assert z.data.shape == (2, 48, 2, 2)
        assert z.data.size == x.size
        np.testing.assert_allclose(back, x, atol=1e-9)

    def test_logdet_matches_dense_jacobian(self):
        cfg = small_config(levels=1, steps=2)
        rng = np.random.default_rng(20)
        model = random_model(cfg, rng)
        x = rng.normal(size=(3, 4, 4))
        feats = random_cond_feats(rng, 1, 1, cfg.model.width, 4, 4)
        jac, logdet = flow_jacobian(model, x, feats)
        ref = np.linalg.slogdet(jac)[1]
        assert abs(logdet - ref) / abs(ref) < 1e-5

    def test_wrong_cond_count_raises(self):
        cfg = small_config(levels=1, steps=1)
        model = random_model(cfg, np.random.default_rng(21))
        with pytest.raises(ValueError):
            model.flow.forward(Tensor(np.zeros((1, 3, 4, 4))), [])

    def test_indivisible_extent_raises(self):
        cfg = small_config(levels=2, steps=1)
        model = random_model(cfg, np.random.default_rng(22))
        feats = random_cond_feats(np.random.default_rng(0), 1, 2, cfg.model.width, 8, 8)
        with pytest.raises(ValueError):
            model.flow.forward(Tensor(np.zeros((1, 3, 6, 6))), feats)
