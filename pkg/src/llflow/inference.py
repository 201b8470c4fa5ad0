"""Enhancement inference, NLL scoring of candidate images, latent offsets for
the brightness sweep, and gradient activation maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Model
from .preprocess import encoder_input, hist_eq, squeeze_like_latent
from .tensor import Tensor
from .training import gaussian_nll


@dataclass
class EnhanceOptions:
    mode: str = "mean"        # mean | sample
    num_samples: int = 1
    temperature: float = 1.0
    z_offset: float = 0.0

    def validate(self):
        if self.mode not in ("mean", "sample"):
            raise ValueError(f"mode must be mean or sample, got {self.mode!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        return self


def _reflect_pad(img: np.ndarray, multiple: int):
    _, h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, (h, w)


def _cond_for(model: Model, x_l: np.ndarray):
    enc_in = encoder_input(Tensor(x_l[None].astype(model.dtype)))
    return model.encoder(enc_in)


def enhance(x_l, model: Model, opts: EnhanceOptions = None, rng=None) -> np.ndarray:
    """Enhance a (3,H,W) low-light image in [0,1].

    mean mode inverts the flow from the encoder's latent mean (+ z_offset);
    sample mode averages num_samples inversions of z ~ N(mean, temperature^2).
    Inputs whose extents are not divisible by 2^levels are reflect-padded and
    cropped back. Output is clamped to [0,1].
    """
    opts = (opts or EnhanceOptions()).validate()
    x_l = np.asarray(x_l)
    if x_l.ndim != 3 or x_l.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) image, got {x_l.shape}")
    padded, (h, w) = _reflect_pad(x_l, 2 ** model.levels)
    with T.no_grad():
        cond = _cond_for(model, padded)
        mean = squeeze_like_latent(cond.color_map, model.levels)
        if opts.mode == "mean":
            z_draws = [mean.data]
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            z_draws = [
                mean.data + opts.temperature * rng.standard_normal(mean.shape).astype(mean.data.dtype)
                for _ in range(opts.num_samples)
            ]
        acc = None
        for zd in z_draws:
            z = Tensor(zd + np.asarray(opts.z_offset, dtype=zd.dtype))
            x_hat = model.flow.inverse(z, cond.level_feats).data[0]
            acc = x_hat if acc is None else acc + x_hat
        out = acc / len(z_draws)
    return np.clip(out[:, :h, :w], 0.0, 1.0)


def score_nll(x_l, candidate, model: Model):
    """NLL of a candidate normally-exposed image given the low-light input.

    Uses the encoder-branch prior mean only (no reference image involved).
    Returns (raw_nats, nats_per_dim).
    """
    x_l = np.asarray(x_l)
    candidate = np.asarray(candidate)
    if x_l.shape != candidate.shape:
        raise ValueError(f"shape mismatch: {x_l.shape} vs {candidate.shape}")
    with T.no_grad():
        cond = _cond_for(model, x_l.astype(model.dtype))
        mean = squeeze_like_latent(cond.color_map, model.levels)
        z, logdet = model.flow.forward(Tensor(candidate[None].astype(model.dtype)),
                                       cond.level_feats)
        raw = float(gaussian_nll(z, mean).data[0] - logdet.data[0])
    return raw, raw / candidate.size


def grad_activation_map(x_l, x_high, model: Model) -> np.ndarray:
    """Histogram-equalized per-pixel L2 norm (across channels) of the NLL
    gradient with respect to the candidate image. Returns (1,H,W) in [0,1]."""
    x_l = np.asarray(x_l, dtype=model.dtype)
    x_high = np.asarray(x_high, dtype=model.dtype)
    if x_l.shape != x_high.shape:
        raise ValueError(f"shape mismatch: {x_l.shape} vs {x_high.shape}")
    with T.no_grad():
        cond = _cond_for(model, x_l)
        mean = squeeze_like_latent(cond.color_map, model.levels)
    candidate = Tensor(x_high[None].copy(), requires_grad=True)
    z, logdet = model.flow.forward(candidate, cond.level_feats)
    loss = T.reduce_mean(gaussian_nll(z, mean) - logdet)
    T.backward(loss)
    norm = np.sqrt(np.sum(candidate.grad[0].astype(np.float64) ** 2, axis=0))
    peak = norm.max()
    if peak > 0:
        norm = norm / peak
    return hist_eq(Tensor(norm[None].astype(np.float64))).data
