"""Exact-NLL training: Gaussian prior with randomized mean selection,
change-of-variables loss, Adam with milestone learning-rate decay,
checkpointing, and the l1-baseline mode used by the ablation."""

from __future__ import annotations

import math
import os
import warnings

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, pack_rng_state, save_checkpoint, unpack_rng_state
from .config import RunConfig, parse_config_text
from .data import sample_patch_batch
from .model import Model, build_model
from .preprocess import color_map, encoder_input, squeeze_like_latent
from .tensor import Tensor


class NonFiniteBatch(ValueError):
    """A single training step produced a non-finite loss."""


class NonFiniteLossError(RuntimeError):
    """Raised after two consecutive non-finite losses; carries the path of the
    checkpoint holding the last finite state."""

    def __init__(self, message, checkpoint_path):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def prior_mean(x_ref, cond, p, u, levels):
    """Latent prior mean: the reference color map (stop-gradient) when the
    uniform draw u falls at or below p, else the encoder's refined color map."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"uniform draw {u} outside [0,1)")
    if u <= p:
        with T.no_grad():
            return squeeze_like_latent(color_map(T.as_tensor(x_ref).detach()), levels)
    return squeeze_like_latent(cond.color_map, levels)


def gaussian_nll(z, mean):
    """Per-sample -log N(z; mean, I) in nats: shape (B,)."""
    z, mean = T.as_tensor(z), T.as_tensor(mean)
    if z.shape != mean.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {mean.shape}")
    d = z.size // z.shape[0]
    diff = z - mean
    return 0.5 * T.reduce_sum(diff * diff, axes=(1, 2, 3)) + 0.5 * T.LOG_2PI * d


def nll_loss(x_l, x_ref, model: Model, u: float, initialize=False):
    """Mean per-dimension NLL of the reference batch under the flow.

    Raises NonFiniteLossError-style diagnostics are left to the caller; this
    function raises ValueError naming the first non-finite layer.
    """
    x_ref = T.as_tensor(x_ref)
    with T.no_grad():
        enc_in = encoder_input(T.as_tensor(x_l))
    cond = model.encoder(enc_in)
    z, logdet = model.flow.forward(x_ref, cond.level_feats, initialize=initialize)
    mean = prior_mean(x_ref, cond, model.cfg.train.selector_p, u, model.levels)
    d = x_ref.size // x_ref.shape[0]
    loss = T.reduce_mean(gaussian_nll(z, mean) - logdet) * (1.0 / d)
    if not np.isfinite(loss.data):
        idx = model.flow.check_finite(x_ref, cond.level_feats)
        raise NonFiniteBatch(f"non-finite loss (first non-finite flow layer: {idx})")
    return loss


def l1_baseline_loss(x_l, x_ref, model: Model):
    """Mean |enhanced - reference| where enhancement inverts the flow from the
    encoder's latent mean. Used for the pixel-loss ablation."""
    x_ref = T.as_tensor(x_ref)
    with T.no_grad():
        enc_in = encoder_input(T.as_tensor(x_l))
    cond = model.encoder(enc_in)
    z = squeeze_like_latent(cond.color_map, model.levels)
    x_hat = model.flow.inverse(z, cond.level_feats)
    loss = T.reduce_mean(T.absolute(x_hat - x_ref))
    if not np.isfinite(loss.data):
        raise NonFiniteBatch("non-finite l1-baseline loss")
    return loss


class Adam:
    """Standard Adam with bias correction and no weight decay."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_global_norm(self):
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def clip_grads(self, max_norm):
        norm = self.grad_global_norm()
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad *= scale
        return norm


def lr_schedule(iteration: int, cfg) -> float:
    """Base lr halved at each passed milestone (fractions of total_iters)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    total = cfg.total_iters
    passed = sum(1 for f in cfg.milestone_fractions() if iteration >= round(f * total))
    return cfg.lr * 0.5 ** passed


def collect_state(model: Model, opt: Adam, iteration: int, rng) -> dict:
    arrays = {name: p.data.copy() for name, p in model.named_parameters().items()}
    for name in opt.m:
        arrays[f"adam.m.{name}"] = opt.m[name].copy()
        arrays[f"adam.v.{name}"] = opt.v[name].copy()
    arrays["meta.iter"] = np.array([iteration], dtype=np.int64)
    arrays["meta.adam_t"] = np.array([opt.t], dtype=np.int64)
    arrays["meta.actnorm"] = np.array(model.actnorm_flags(), dtype=np.uint8)
    arrays["meta.rng"] = pack_rng_state(rng)
    return arrays


def restore_training_state(path):
    """Load a checkpoint for resuming: returns (cfg, model, arrays, rng, iteration)."""
    config_text, arrays = load_checkpoint(path)
    cfg = parse_config_text(config_text).validate()
    model = build_model(cfg)
    model.load_state(arrays, actnorm_flags=arrays["meta.actnorm"].tolist())
    rng = unpack_rng_state(arrays["meta.rng"])
    iteration = int(arrays["meta.iter"][0])
    return cfg, model, arrays, rng, iteration


def load_model(path):
    """Load a checkpoint for inference: returns (cfg, model)."""
    config_text, arrays = load_checkpoint(path)
    cfg = parse_config_text(config_text).validate()
    model = build_model(cfg)
    model.load_state(arrays, actnorm_flags=arrays["meta.actnorm"].tolist())
    return cfg, model


def train(cfg: RunConfig, pairs, out_dir, resume=None, log=None):
    """Run the training loop; writes loss.csv and checkpoints under out_dir.

    Returns the path of the final checkpoint. Aborts with NonFiniteLossError
    after two consecutive non-finite losses, checkpointing the last finite
    state first.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    tc = cfg.train

    if resume is not None:
        _, model, arrays, rng, start_iter = restore_training_state(resume)
        opt = Adam(model.named_parameters())
        for name in opt.m:
            opt.m[name][...] = arrays[f"adam.m.{name}"]
            opt.v[name][...] = arrays[f"adam.v.{name}"]
        opt.t = int(arrays["meta.adam_t"][0])
    else:
        model = build_model(cfg)
        rng = np.random.default_rng(tc.seed)
        opt = Adam(model.named_parameters())
        start_iter = 0

    if tc.loss_mode == "l1-baseline" and tc.warm_start_iters == 0:
        warnings.warn(
            "l1-baseline training without an NLL warm start is known not to "
            "converge; set train.warm_start_iters > 0", RuntimeWarning)

    config_text = cfg.to_text()
    csv_path = os.path.join(out_dir, "loss.csv")
    final_path = os.path.join(out_dir, "checkpoint.llf")
    last_finite = None
    nonfinite_streak = 0

    mode = "a" if resume is not None and os.path.exists(csv_path) else "w"
    with open(csv_path, mode, encoding="utf-8") as csv:
        if mode == "w":
            csv.write("iter,loss_nats_per_dim,lr\n")
        for it in range(start_iter + 1, tc.total_iters + 1):
            lr = lr_schedule(it - 1, tc)
            low, ref, _ = sample_patch_batch(pairs, tc.patch_size, tc.batch_size, rng)
            low = low.astype(model.dtype)
            ref = ref.astype(model.dtype)
            u = float(rng.random())
            use_l1 = tc.loss_mode == "l1-baseline" and it > tc.warm_start_iters
            opt.zero_grad()
            try:
                if use_l1:
                    loss = l1_baseline_loss(low, ref, model)
                else:
                    loss = nll_loss(low, ref, model, u, initialize=(it == 1))
                T.backward(loss)
                loss_val = float(loss.data)
            except (NonFiniteBatch, ZeroDivisionError, FloatingPointError, np.linalg.LinAlgError) as exc:
                nonfinite_streak += 1
                if nonfinite_streak >= 2:
                    abort_path = os.path.join(out_dir, "abort_checkpoint.llf")
                    if last_finite is not None:
                        save_checkpoint(abort_path, config_text, last_finite)
                    raise NonFiniteLossError(
                        f"aborting at iteration {it}: {exc}", abort_path)
                csv.write(f"{it},nan,{lr}\n")
                continue
            nonfinite_streak = 0
            opt.clip_grads(tc.grad_clip)
            opt.step(lr)
            last_finite = collect_state(model, opt, it, rng)
            csv.write(f"{it},{loss_val!r},{lr!r}\n")
            if log is not None and (it % 100 == 0 or it == 1):
                log(f"iter {it}/{tc.total_iters} loss={loss_val:.4f} lr={lr:g}")
            if tc.checkpoint_every > 0 and it % tc.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{it:06d}.llf"),
                                config_text, last_finite)
    if last_finite is None:
        raise NonFiniteLossError("no finite training step completed", None)
    save_checkpoint(final_path, config_text, last_finite)
    return final_path
