"""Encoder + invertible network bound together with parameter naming for the
optimizer and checkpoints."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .encoder import Encoder
from .flow import FlowModel


def _np_dtype(name):
    return np.float64 if name == "float64" else np.float32


class Model:
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        m = cfg.model
        dtype = _np_dtype(m.dtype)
        self.cfg = cfg
        self.dtype = dtype
        self.encoder = Encoder(
            rng,
            levels=m.levels,
            width=m.width,
            blocks=m.rrdb_blocks,
            dense_per_block=m.rrdb_dense,
            growth=m.rrdb_growth,
            residual_scale=m.residual_scale,
            color_range=m.color_range,
            dtype=dtype,
        )
        self.flow = FlowModel(
            rng,
            levels=m.levels,
            steps_per_level=m.steps_per_level,
            cond_channels=m.width,
            hidden=m.hidden,
            dtype=dtype,
        )

    @property
    def levels(self):
        return self.cfg.model.levels

    def named_parameters(self):
        out = {}
        out.update(self.encoder.params("encoder"))
        out.update(self.flow.params("flow"))
        return out

    def load_state(self, arrays: dict, actnorm_flags=None):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}...")
        for name, p in params.items():
            a = arrays[name]
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {a.shape} vs {p.data.shape}")
            p.data[...] = a.astype(p.data.dtype)
        norms = list(self.flow.actnorms())
        if actnorm_flags is None:
            actnorm_flags = [True] * len(norms)
        for norm, flag in zip(norms, actnorm_flags):
            norm.initialized = bool(flag)

    def actnorm_flags(self):
        return [n.initialized for n in self.flow.actnorms()]


def build_model(cfg: RunConfig, seed=None) -> Model:
    """Deterministic model construction; the seed defaults to train.seed."""
    if seed is None:
        seed = cfg.train.seed
    return Model(cfg, np.random.default_rng(seed))


def random_model(cfg: RunConfig, rng: np.random.Generator) -> Model:
    """A model with fully random parameters (tests draw many of these);
    actnorm layers get random affine parameters and are marked initialized."""
    model = Model(cfg, rng)
    for norm in model.flow.actnorms():
        norm.log_scale.data[...] = rng.normal(0.0, 0.1, norm.log_scale.data.shape)
        norm.bias.data[...] = rng.normal(0.0, 0.1, norm.bias.data.shape)
        norm.initialized = True
    for steps in model.flow.level_steps:
        for step in steps:
            c = step.inv1x1.weight.data.shape[0]
            q, _ = np.linalg.qr(rng.normal(size=(c, c)))
            step.inv1x1.weight.data[...] = q
    for name, p in model.named_parameters().items():
        if name.endswith(".b") and p.data.size > 1:
            p.data[...] = rng.normal(0.0, 0.05, p.data.shape)
        if "coupling.conv3.w" in name:
            p.data[...] = rng.normal(0.0, 0.05, p.data.shape)
    return model
