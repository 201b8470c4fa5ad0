"""Conditioning inputs: histogram equalization, illumination-invariant color
map, noise map, and the 12-channel stack fed to the encoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .flow import squeeze
from .tensor import Tensor

COLOR_EPS = 1e-6


def _batched(x):
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _debatch(x, was_3d):
    return T.reshape(x, x.shape[1:]) if was_3d else x


def color_map(x) -> Tensor:
    """x / (channel mean + eps): the per-pixel ratio to gray, so the output's
    channel mean is ~1 wherever the pixel is not essentially black."""
    x, flat = _batched(x)
    out = x / (T.channel_mean(x) + COLOR_EPS)
    return _debatch(out, flat)


def noise_map(x) -> Tensor:
    """Per-pixel max of |horizontal| and |vertical| forward differences of the
    color map; used by the encoder as an attention signal."""
    x, flat = _batched(x)
    c = x / (T.channel_mean(x) + COLOR_EPS)
    gx = T.absolute(T.spatial_gradient(c, "x"))
    gy = T.absolute(T.spatial_gradient(c, "y"))
    return _debatch(T.maximum(gx, gy), flat)


def hist_eq(x) -> Tensor:
    """Per-channel 256-bin histogram equalization on [0,1].

    output = (CDF(bin(v)) - CDF(bin 0)) / (1 - CDF(bin 0)), clamped to [0,1].
    A constant channel is passed through unchanged. Not differentiable; the
    result is always detached from the tape.
    """
    x, flat = _batched(x)
    data = x.data
    out = np.empty_like(data)
    n = data.shape[2] * data.shape[3]
    for b in range(data.shape[0]):
        for c in range(data.shape[1]):
            ch = data[b, c]
            bins = np.minimum((ch * 256).astype(np.int64), 255)
            if bins.min() == bins.max():
                out[b, c] = ch
                continue
            cdf = np.cumsum(np.bincount(bins.ravel(), minlength=256)) / n
            cdf0 = cdf[0]
            lut = np.clip((cdf - cdf0) / (1.0 - cdf0), 0.0, 1.0).astype(data.dtype)
            out[b, c] = lut[bins]
    return _debatch(Tensor(out), flat)


def squeeze_like_latent(m, levels: int) -> Tensor:
    """Apply the flow's space-to-channel squeeze `levels` times, so a color
    map matches the latent's shape."""
    m, flat = _batched(m)
    for _ in range(levels):
        m = squeeze(m)
    return _debatch(m, flat)


def encoder_input(x_l) -> Tensor:
    """The 12-channel conditioning stack [x_l, hist_eq(x_l), C(x_l), N(x_l)]."""
    x_l, flat = _batched(x_l)
    if x_l.shape[1] != 3:
        raise ValueError(f"expected 3-channel input, got {x_l.shape[1]}")
    parts = [x_l, hist_eq(x_l), color_map(x_l), noise_map(x_l)]
    return _debatch(T.concat(parts, axis=1), flat)
