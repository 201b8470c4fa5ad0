"""Image IO, paired datasets, deterministic patch sampling, and the synthetic
toy-corpus generator that makes desk-scale runs self-contained.

Only 8-bit RGB PNG is accepted; anything else is rejected rather than
silently converted so pixel round-trips stay bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class DataError(ValueError):
    pass


def read_png(path) -> np.ndarray:
    """8-bit RGB PNG -> uint8 array of shape (3, H, W)."""
    with Image.open(path) as img:
        if img.format != "PNG":
            raise DataError(f"{path}: expected PNG, got {img.format}")
        if img.mode != "RGB":
            raise DataError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
        arr = np.asarray(img, dtype=np.uint8)
    return arr.transpose(2, 0, 1)


def write_png(path, arr: np.ndarray):
    """uint8 (3,H,W) or (1,H,W) array -> PNG file."""
    if arr.dtype != np.uint8:
        raise DataError(f"write_png expects uint8, got {arr.dtype}")
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(f"write_png expects (1|3,H,W), got {arr.shape}")
    if arr.shape[0] == 1:
        img = Image.fromarray(arr[0], mode="L")
    else:
        img = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    img.save(path, format="PNG")


def to_unit(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    return arr.astype(dtype) / 255.0


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


@dataclass
class ImagePair:
    low: np.ndarray   # (3,H,W) float in [0,1]
    ref: np.ndarray   # (3,H,W) float in [0,1]
    id: str


def load_pair_dataset(root, dtype=np.float32):
    """LOL-style layout: <root>/low/*.png and <root>/high/*.png matched by
    filename; pairs are returned in lexicographic id order."""
    low_dir = os.path.join(root, "low")
    high_dir = os.path.join(root, "high")
    for d in (low_dir, high_dir):
        if not os.path.isdir(d):
            raise DataError(f"missing dataset directory {d}")
    lows = {f for f in os.listdir(low_dir) if f.endswith(".png")}
    highs = {f for f in os.listdir(high_dir) if f.endswith(".png")}
    orphans = sorted(lows ^ highs)
    if orphans:
        raise DataError(f"unmatched dataset files: {', '.join(orphans)}")
    pairs = []
    for name in sorted(lows):
        low = to_unit(read_png(os.path.join(low_dir, name)), dtype)
        ref = to_unit(read_png(os.path.join(high_dir, name)), dtype)
        if low.shape != ref.shape:
            raise DataError(f"{name}: low/high shapes differ ({low.shape} vs {ref.shape})")
        pairs.append(ImagePair(low=low, ref=ref, id=os.path.splitext(name)[0]))
    if not pairs:
        raise DataError(f"no image pairs found under {root}")
    return pairs


@dataclass
class SynthSpec:
    count: int = 200
    size: int = 32
    gamma_range: tuple = (2.0, 4.0)
    dim_range: tuple = (0.05, 0.3)
    noise_range: tuple = (0.01, 0.05)
    seed: int = 0
    content: str = "shapes"        # gradients | shapes | tiles-from-directory
    tile_dir: str = ""

    def validate(self):
        if self.gamma_range[0] < 1:
            raise DataError("gamma range must start at >= 1")
        if not (0 < self.dim_range[0] <= self.dim_range[1] <= 1):
            raise DataError("dim factor range must lie in (0,1]")
        if self.content not in ("gradients", "shapes", "tiles-from-directory"):
            raise DataError(f"unknown content mode {self.content!r}")
        if self.content == "tiles-from-directory" and not self.tile_dir:
            raise DataError("tiles-from-directory needs tile_dir")
        return self

    def to_dict(self):
        return {
            "count": self.count, "size": self.size,
            "gamma_range": list(self.gamma_range), "dim_range": list(self.dim_range),
            "noise_range": list(self.noise_range), "seed": self.seed,
            "content": self.content, "tile_dir": self.tile_dir,
        }


def _gradient_image(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b = rng.uniform(0.25, 0.95, 2)
        theta = rng.uniform(0, 2 * np.pi)
        t = np.cos(theta) * xx + np.sin(theta) * yy
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img[c] = a + (b - a) * t
    return img


def _shapes_image(rng, size):
    img = _gradient_image(rng, size)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.25, 0.95, 3)
        cy, cx = rng.uniform(0, size, 2)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(size * 0.1, size * 0.4, 2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            hy, hx = rng.uniform(size * 0.1, size * 0.4, 2)
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        img[:, mask] = color[:, None]
    # fine per-pixel texture keeps flat regions from being exactly constant,
    # so the reference retains per-pixel variation the degraded input cannot
    # fully reveal
    img = img + rng.normal(0.0, 0.08, img.shape)
    return np.clip(img, 0.0, 1.0)


def _tile_image(rng, size, tiles):
    src = tiles[rng.integers(len(tiles))]
    _, h, w = src.shape
    if h < size or w < size:
        raise DataError(f"tile source smaller than requested size {size}")
    y = rng.integers(0, h - size + 1)
    x = rng.integers(0, w - size + 1)
    return src[:, y : y + size, x : x + size].astype(np.float64)


def synth_generate(spec: SynthSpec, out_root):
    """Write a paired corpus: reference content images plus degraded low-light
    versions clamp(factor * ref^gamma + noise). Fully seeded; identical spec
    and seed give byte-identical files."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    low_dir = os.path.join(out_root, "low")
    high_dir = os.path.join(out_root, "high")
    os.makedirs(low_dir, exist_ok=True)
    os.makedirs(high_dir, exist_ok=True)
    tiles = None
    if spec.content == "tiles-from-directory":
        tiles = [to_unit(read_png(os.path.join(spec.tile_dir, f)), np.float64)
                 for f in sorted(os.listdir(spec.tile_dir)) if f.endswith(".png")]
        if not tiles:
            raise DataError(f"no PNG tiles under {spec.tile_dir}")
    width = len(str(max(spec.count - 1, 1)))
    for i in range(spec.count):
        if spec.content == "gradients":
            ref = _gradient_image(rng, spec.size)
        elif spec.content == "shapes":
            ref = _shapes_image(rng, spec.size)
        else:
            ref = _tile_image(rng, spec.size, tiles)
        gamma = rng.uniform(*spec.gamma_range)
        factor = rng.uniform(*spec.dim_range)
        sigma = rng.uniform(*spec.noise_range)
        low = np.clip(factor * ref ** gamma + rng.normal(0.0, sigma, ref.shape), 0.0, 1.0)
        name = f"{i:0{width}d}.png"
        write_png(os.path.join(high_dir, name), to_uint8(ref))
        write_png(os.path.join(low_dir, name), to_uint8(low))
    manifest = {"spec": spec.to_dict(), "format": "llflow-synth-v1"}
    with open(os.path.join(out_root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_root


def sample_patch_batch(pairs, patch, batch, rng):
    """Random crops with identical coordinates for low and ref of each pair.

    Returns (low, ref, coords) where coords logs (pair_index, y, x) per item.
    """
    _, h, w = pairs[0].low.shape
    if patch > h or patch > w:
        raise DataError(f"patch {patch} exceeds image extents {h}x{w}")
    lows, refs, coords = [], [], []
    for _ in range(batch):
        k = int(rng.integers(len(pairs)))
        y = int(rng.integers(0, pairs[k].low.shape[1] - patch + 1))
        x = int(rng.integers(0, pairs[k].low.shape[2] - patch + 1))
        lows.append(pairs[k].low[:, y : y + patch, x : x + patch])
        refs.append(pairs[k].ref[:, y : y + patch, x : x + patch])
        coords.append((k, y, x))
    return np.stack(lows), np.stack(refs), coords
