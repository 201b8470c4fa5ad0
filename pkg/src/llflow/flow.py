"""Invertible network: squeeze, actnorm, invertible 1x1 mixing, conditional
affine coupling, composed into levels with exact log-determinant accounting.

Every layer exposes forward(h, cond) -> (h', logdet contribution) and
inverse(h', cond) -> h. Both directions are built from taped tensor ops, so
gradients flow through either direction (the inverse pass is needed for the
l1 training ablation).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def squeeze(h: Tensor) -> Tensor:
    """2x2 space-to-channel rearrangement: (B,C,H,W) -> (B,4C,H/2,W/2).

    Output channel order: input channel c maps to the block
    [4c + 2*dy + dx] for the (dy, dx) corner of each 2x2 patch, so a
    1x2x2 input [[a,b],[c,d]] becomes channels (a, b, c, d).
    """
    b, c, h_, w_ = h.shape
    if h_ % 2 or w_ % 2:
        raise ValueError(f"squeeze needs even spatial extents, got {h_}x{w_}")
    x = T.reshape(h, (b, c, h_ // 2, 2, w_ // 2, 2))
    x = T.transpose(x, (0, 1, 3, 5, 2, 4))
    return T.reshape(x, (b, 4 * c, h_ // 2, w_ // 2))


def unsqueeze(h: Tensor) -> Tensor:
    """Exact inverse of squeeze."""
    b, c, h_, w_ = h.shape
    if c % 4:
        raise ValueError(f"unsqueeze needs channels divisible by 4, got {c}")
    x = T.reshape(h, (b, c // 4, 2, 2, h_, w_))
    x = T.transpose(x, (0, 1, 4, 2, 5, 3))
    return T.reshape(x, (b, c // 4, 2 * h_, 2 * w_))


class Conv2d:
    """Convolution with bias; padding defaults to 'same' for odd kernels."""

    def __init__(self, rng, cin, cout, ksize, stride=1, padding=None, zero_init=False, dtype=np.float32):
        if padding is None:
            padding = ksize // 2
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((cout, cin, ksize, ksize), dtype=dtype)
        else:
            std = math.sqrt(2.0 / (cin * ksize * ksize))
            w = rng.normal(0.0, std, (cout, cin, ksize, ksize)).astype(dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros((1, cout, 1, 1), dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.stride, self.padding) + self.b

    def params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class ActNorm:
    """Per-channel affine h' = (h + bias) * exp(log_scale).

    Parameters are data-initialized from the first batch so post-init
    activations have zero mean and unit variance per channel.
    """

    def __init__(self, channels, dtype=np.float32):
        self.log_scale = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.initialized = False

    def init_from_data(self, h: Tensor):
        mean = h.data.mean(axis=(0, 2, 3), keepdims=True)[:1]
        std = h.data.std(axis=(0, 2, 3), keepdims=True)[:1]
        if np.any(std == 0):
            raise ValueError("actnorm data init: zero per-channel std")
        self.bias.data[...] = -mean
        self.log_scale.data[...] = -np.log(std)
        self.initialized = True

    def forward(self, h: Tensor):
        out = (h + self.bias) * T.exp(self.log_scale)
        hw = h.shape[2] * h.shape[3]
        logdet = T.reduce_sum(self.log_scale) * float(hw)
        return out, logdet

    def inverse(self, y: Tensor):
        return y * T.exp(-self.log_scale) - self.bias

    def params(self, prefix):
        return {f"{prefix}.log_scale": self.log_scale, f"{prefix}.bias": self.bias}


class Inv1x1:
    """Invertible per-pixel channel mixing by a dense CxC matrix.

    Initialized to the identity so the whole flow starts sign-aligned with
    its input: a positive shift in the latent then inverts to a brighter
    image, which training preserves. Kept as a plain matrix; the channel
    counts here are small enough for direct inversion.
    """

    def __init__(self, rng, channels, dtype=np.float32):
        self.weight = Tensor(np.eye(channels, dtype=dtype), requires_grad=True)

    def forward(self, h: Tensor):
        sign, ld = np.linalg.slogdet(self.weight.data)
        if sign == 0 or ld <= math.log(1e-12):
            raise np.linalg.LinAlgError("inv1x1 weight matrix is singular")
        out = T.channel_mix(self.weight, h)
        hw = h.shape[2] * h.shape[3]
        logdet = T.logabsdet(self.weight) * float(hw)
        return out, logdet

    def inverse(self, y: Tensor):
        return T.channel_mix_inverse(self.weight, y)

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight}


class CondAffineCoupling:
    """Conditional affine coupling over channel halves.

    (raw_s, t) = NN(h_a, cond); s = sigmoid(raw_s + 2) + 0.5, so the scale
    stays in (0.5, 1.5). h_b' = s * h_b + t, h_a passes through unchanged.
    The last conv of the subnet is zero-initialized so a fresh layer applies
    the constant scale sigmoid(2) + 0.5.
    """

    def __init__(self, rng, channels, cond_channels, hidden, dtype=np.float32):
        if channels < 2:
            raise ValueError("coupling needs at least 2 channels")
        self.c_a = channels // 2
        self.c_b = channels - self.c_a
        self.conv1 = Conv2d(rng, self.c_a + cond_channels, hidden, 3, dtype=dtype)
        self.conv2 = Conv2d(rng, hidden, hidden, 1, dtype=dtype)
        self.conv3 = Conv2d(rng, hidden, 2 * self.c_b, 3, zero_init=True, dtype=dtype)

    def _scale_shift(self, h_a: Tensor, cond: Tensor):
        if cond.shape[0] != h_a.shape[0] or cond.shape[2:] != h_a.shape[2:]:
            raise ValueError(
                f"condition shape {cond.shape} does not match activations {h_a.shape}"
            )
        net = T.leaky_relu(self.conv1(T.concat([h_a, cond], axis=1)))
        net = T.leaky_relu(self.conv2(net))
        raw = self.conv3(net)
        raw_s = T.narrow(raw, 1, 0, self.c_b)
        t = T.narrow(raw, 1, self.c_b, self.c_b)
        s = T.sigmoid(raw_s + 2.0) + 0.5
        return s, t

    def forward(self, h: Tensor, cond: Tensor):
        h_a = T.narrow(h, 1, 0, self.c_a)
        h_b = T.narrow(h, 1, self.c_a, self.c_b)
        s, t = self._scale_shift(h_a, cond)
        out = T.concat([h_a, h_b * s + t], axis=1)
        logdet = T.reduce_sum(T.log(s), axes=(1, 2, 3))
        return out, logdet

    def inverse(self, y: Tensor, cond: Tensor):
        h_a = T.narrow(y, 1, 0, self.c_a)
        y_b = T.narrow(y, 1, self.c_a, self.c_b)
        s, t = self._scale_shift(h_a, cond)
        return T.concat([h_a, (y_b - t) / s], axis=1)

    def params(self, prefix):
        out = {}
        out.update(self.conv1.params(f"{prefix}.conv1"))
        out.update(self.conv2.params(f"{prefix}.conv2"))
        out.update(self.conv3.params(f"{prefix}.conv3"))
        return out


class FlowStep:
    def __init__(self, rng, channels, cond_channels, hidden, dtype=np.float32):
        self.actnorm = ActNorm(channels, dtype)
        self.inv1x1 = Inv1x1(rng, channels, dtype)
        self.coupling = CondAffineCoupling(rng, channels, cond_channels, hidden, dtype)

    def forward(self, h, cond, initialize=False):
        if initialize and not self.actnorm.initialized:
            self.actnorm.init_from_data(h)
        h, ld1 = self.actnorm.forward(h)
        h, ld2 = self.inv1x1.forward(h)
        h, ld3 = self.coupling.forward(h, cond)
        return h, ld1 + ld2 + ld3

    def inverse(self, y, cond):
        y = self.coupling.inverse(y, cond)
        y = self.inv1x1.inverse(y)
        return self.actnorm.inverse(y)

    def params(self, prefix):
        out = {}
        out.update(self.actnorm.params(f"{prefix}.actnorm"))
        out.update(self.inv1x1.params(f"{prefix}.inv1x1"))
        out.update(self.coupling.params(f"{prefix}.coupling"))
        return out


class FlowModel:
    """Squeeze + flow steps stacked into levels; no latent splits, so the
    latent keeps the input's element count (3 * 4^levels channels)."""

    def __init__(self, rng, levels=2, steps_per_level=4, in_channels=3,
                 cond_channels=32, hidden=32, dtype=np.float32):
        self.levels = levels
        self.steps_per_level = steps_per_level
        self.in_channels = in_channels
        self.level_steps = []
        c = in_channels
        for _ in range(levels):
            c *= 4
            self.level_steps.append(
                [FlowStep(rng, c, cond_channels, hidden, dtype) for _ in range(steps_per_level)]
            )
        self.latent_channels = c

    def latent_shape(self, h, w):
        f = 2 ** self.levels
        if h % f or w % f:
            raise ValueError(f"spatial extents {h}x{w} not divisible by {f}")
        return (self.latent_channels, h // f, w // f)

    def forward(self, x: Tensor, cond_feats, initialize=False):
        """Map image to latent; returns (z, per-sample logdet Tensor of shape (B,))."""
        b = x.shape[0]
        self.latent_shape(x.shape[2], x.shape[3])
        if len(cond_feats) != self.levels:
            raise ValueError(f"expected {self.levels} condition features, got {len(cond_feats)}")
        h = x
        logdet = Tensor(np.zeros(b, dtype=x.data.dtype))
        for lvl in range(self.levels):
            h = squeeze(h)
            for step in self.level_steps[lvl]:
                h, ld = step.forward(h, cond_feats[lvl], initialize)
                logdet = logdet + ld
        return h, logdet

    def inverse(self, z: Tensor, cond_feats):
        expect = (z.shape[1],) + tuple(z.shape[2:])
        h, w = z.shape[2] * 2 ** self.levels, z.shape[3] * 2 ** self.levels
        if expect != self.latent_shape(h, w):
            raise ValueError(f"latent shape {expect} does not match model")
        y = z
        for lvl in reversed(range(self.levels)):
            for step in reversed(self.level_steps[lvl]):
                y = step.inverse(y, cond_feats[lvl])
            y = unsqueeze(y)
        return y

    def check_finite(self, x: Tensor, cond_feats):
        """Diagnostic pass: index of the first layer producing non-finite values, or None."""
        with T.no_grad():
            h = x
            idx = 0
            for lvl in range(self.levels):
                h = squeeze(h)
                if not np.isfinite(h.data).all():
                    return idx
                idx += 1
                for step in self.level_steps[lvl]:
                    h, _ = step.forward(h, cond_feats[lvl])
                    if not np.isfinite(h.data).all():
                        return idx
                    idx += 1
        return None

    def params(self, prefix="flow"):
        out = {}
        for lvl, steps in enumerate(self.level_steps):
            for i, step in enumerate(steps):
                out.update(step.params(f"{prefix}.l{lvl}.s{i}"))
        return out

    def actnorms(self):
        for steps in self.level_steps:
            for step in steps:
                yield step.actnorm
