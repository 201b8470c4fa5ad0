"""Self-contained invariant checks behind the `selftest` command: autodiff
against finite differences, flow round-trips, exact log-determinants against
dense Jacobians, and metric sanity."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import RunConfig
from .metrics import psnr, ssim
from .model import random_model
from .preprocess import color_map
from .tensor import Tensor
from .training import nll_loss


def small_config(levels=1, steps=2, dtype="float64") -> RunConfig:
    cfg = RunConfig()
    cfg.model.levels = levels
    cfg.model.steps_per_level = steps
    cfg.model.width = 8
    cfg.model.hidden = 8
    cfg.model.rrdb_blocks = 1
    cfg.model.rrdb_growth = 4
    cfg.model.dtype = dtype
    cfg.train.patch_size = 4 * 2 ** (levels - 1)
    return cfg


def random_cond_feats(rng, batch, levels, width, h, w, dtype=np.float64):
    feats = []
    for lvl in range(1, levels + 1):
        feats.append(Tensor(rng.normal(size=(batch, width, h >> lvl, w >> lvl)).astype(dtype)))
    return feats


def flow_jacobian(model, x: np.ndarray, cond_feats) -> tuple[np.ndarray, float]:
    """Dense Jacobian dz/dx via repeated backward passes; returns (J, logdet)."""
    xt = Tensor(x[None].copy(), requires_grad=True)
    z, logdet = model.flow.forward(xt, cond_feats)
    d = x.size
    jac = np.zeros((d, d))
    zflat = T.reshape(z, (d,))
    for i in range(d):
        for p in _walk(zflat):
            p.grad = None
        T.backward(zflat[i])
        jac[i] = xt.grad.reshape(d)
    return jac, float(logdet.data[0])


def _walk(node):
    seen = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        yield n
        stack.extend(n._parents)


def run_selftest(rng=None):
    """Returns a list of (check name, passed, detail string)."""
    if rng is None:
        rng = np.random.default_rng(7)
    results = []

    # autodiff vs central finite differences on a composed function
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    y = Tensor(rng.normal(size=(5,)), requires_grad=True)

    def f(xv, yv):
        return T.reduce_sum(T.tanh(xv * yv) + T.sigmoid(xv - yv) * T.exp(0.3 * xv))

    T.backward(f(x, y))
    eps = 1e-6
    ok = True
    worst = 0.0
    for i in range(5):
        for leaf in (x, y):
            base = leaf.data[i]
            leaf.data[i] = base + eps
            hi = float(f(Tensor(x.data), Tensor(y.data)).data)
            leaf.data[i] = base - eps
            lo = float(f(Tensor(x.data), Tensor(y.data)).data)
            leaf.data[i] = base
            fd = (hi - lo) / (2 * eps)
            rel = abs(fd - leaf.grad[i]) / max(abs(fd), 1e-8)
            worst = max(worst, rel)
            ok &= rel < 1e-4
    results.append(("autodiff finite-difference check", ok, f"max rel err {worst:.2e}"))

    # flow round trip
    cfg = small_config(levels=2, steps=2)
    cfg.train.patch_size = 8
    model = random_model(cfg, rng)
    xin = rng.normal(size=(3, 8, 8))
    feats = random_cond_feats(rng, 1, 2, cfg.model.width, 8, 8)
    with T.no_grad():
        z, _ = model.flow.forward(Tensor(xin[None]), feats)
        back = model.flow.inverse(z, feats).data[0]
    err = float(np.abs(back - xin).max())
    results.append(("flow round-trip", err < 1e-9, f"max abs err {err:.2e}"))

    # logdet vs dense Jacobian on a tiny flow
    cfg = small_config(levels=1, steps=2)
    model = random_model(cfg, rng)
    xin = rng.normal(size=(3, 4, 4))
    feats = random_cond_feats(rng, 1, 1, cfg.model.width, 4, 4)
    jac, logdet = flow_jacobian(model, xin, feats)
    _, ref = np.linalg.slogdet(jac)
    rel = abs(logdet - ref) / max(abs(ref), 1e-9)
    results.append(("exact log-determinant", rel < 1e-8, f"rel err {rel:.2e}"))

    # gradient of the full loss against finite differences
    cfg = small_config(levels=1, steps=1)
    model = random_model(cfg, rng)
    low = rng.uniform(0.02, 0.3, (2, 3, 4, 4))
    ref_img = rng.uniform(0.3, 0.95, (2, 3, 4, 4))
    params = model.named_parameters()
    loss = nll_loss(low, ref_img, model, u=0.9)
    T.backward(loss)
    name = "flow.l0.s0.coupling.conv1.w"
    p = params[name]
    g = p.grad.reshape(-1)[0]
    step = 1e-5
    base = p.data.reshape(-1)[0]
    p.data.reshape(-1)[0] = base + step
    hi = float(nll_loss(low, ref_img, model, u=0.9).data)
    p.data.reshape(-1)[0] = base - step
    lo = float(nll_loss(low, ref_img, model, u=0.9).data)
    p.data.reshape(-1)[0] = base
    fd = (hi - lo) / (2 * step)
    rel = abs(fd - g) / max(abs(fd), 1e-8)
    results.append(("loss gradient check", rel < 1e-4, f"rel err {rel:.2e}"))

    # metrics sanity
    a = rng.uniform(0, 1, (3, 16, 16))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    mse = np.mean((a - b) ** 2)
    ok = abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-9 and psnr(a, a) == 99.0
    ok &= abs(ssim(a, a) - 1.0) < 1e-12 and ssim(a, b) < 1.0
    results.append(("psnr/ssim sanity", ok, ""))

    # color map invariance under scaling
    img = rng.uniform(0.2, 1.0, (3, 8, 8))
    c1 = color_map(Tensor(img)).data
    c2 = color_map(Tensor(0.37 * img)).data
    err = float(np.abs(c1 - c2).max())
    results.append(("color-map illumination invariance", err < 1e-4, f"max abs err {err:.2e}"))

    return results
