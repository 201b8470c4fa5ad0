"""Conditioning network: a small residual-dense trunk mapping the 12-channel
input to a refined color map (the latent prior mean) plus one condition
feature map per flow level."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .flow import Conv2d
from .tensor import Tensor


@dataclass
class CondFeatures:
    """Encoder outputs: the refined color map and per-level condition maps."""

    color_map: Tensor
    level_feats: list


class DenseBlock:
    """Residual dense block: a short chain of densely connected convs whose
    output is scaled by `residual_scale` and added back to the input."""

    def __init__(self, rng, width, growth, n_dense, residual_scale, dtype):
        self.residual_scale = residual_scale
        self.convs = []
        cin = width
        for i in range(n_dense):
            cout = width if i == n_dense - 1 else growth
            self.convs.append(Conv2d(rng, cin, cout, 3, dtype=dtype))
            cin += growth
        self.convs[-1].w.data *= 0.1  # damp the residual branch at init

    def __call__(self, x):
        feats = [x]
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(T.concat(feats, axis=1) if len(feats) > 1 else feats[0])
            if i < len(self.convs) - 1:
                h = T.leaky_relu(h)
                feats.append(h)
        return x + h * self.residual_scale

    def params(self, prefix):
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        return out


class Encoder:
    """Maps the 12-channel conditioning stack to CondFeatures.

    Deterministic given parameters: no sampling happens inside. The color
    map head is 2*sigmoid, bounding outputs to (0, 2); analytic color maps
    have per-pixel channel mean ~1, so values above 2 are rare.
    """

    def __init__(self, rng, levels=2, width=32, blocks=4, dense_per_block=3,
                 growth=16, residual_scale=0.2, color_range=2.0, dtype=np.float32):
        self.levels = levels
        self.color_range = color_range
        self.stem = Conv2d(rng, 12, width, 3, dtype=dtype)
        self.blocks = [
            DenseBlock(rng, width, growth, dense_per_block, residual_scale, dtype)
            for _ in range(blocks)
        ]
        self.trunk_conv = Conv2d(rng, width, width, 3, dtype=dtype)
        self.head = Conv2d(rng, width, 3, 3, dtype=dtype)
        self.level_convs = [Conv2d(rng, width, width, 3, stride=2, padding=1, dtype=dtype)
                            for _ in range(levels)]

    def __call__(self, enc_in: Tensor) -> CondFeatures:
        if enc_in.shape[2] % (2 ** self.levels) or enc_in.shape[3] % (2 ** self.levels):
            raise ValueError(
                f"spatial extents {enc_in.shape[2]}x{enc_in.shape[3]} "
                f"not divisible by {2 ** self.levels}"
            )
        t0 = T.leaky_relu(self.stem(enc_in))
        h = t0
        for block in self.blocks:
            h = block(h)
        trunk = t0 + self.trunk_conv(h)
        color = T.sigmoid(self.head(trunk)) * self.color_range
        feats = []
        f = trunk
        for conv in self.level_convs:
            f = T.leaky_relu(conv(f))
            feats.append(f)
        return CondFeatures(color_map=color, level_feats=feats)

    def params(self, prefix="encoder"):
        out = {}
        out.update(self.stem.params(f"{prefix}.stem"))
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"{prefix}.block{i}"))
        out.update(self.trunk_conv.params(f"{prefix}.trunk"))
        out.update(self.head.params(f"{prefix}.head"))
        for i, conv in enumerate(self.level_convs):
            out.update(conv.params(f"{prefix}.level{i}"))
        return out
