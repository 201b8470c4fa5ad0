"""PSNR and SSIM. PSNR is computed on RGB MSE; SSIM on Rec.601 luminance
with the standard 11x11 Gaussian window (sigma 1.5), averaged over valid
window positions."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 99.0

REC601 = np.array([0.299, 0.587, 0.114])

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10*log10(1/MSE) in dB for [0,1] images; identical inputs report the
    documented 99 dB cap."""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def luminance(img) -> np.ndarray:
    """(3,H,W) RGB -> (H,W) Rec.601 luma."""
    img = np.asarray(img, dtype=np.float64)
    return np.tensordot(REC601, img, axes=([0], [0]))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b) -> float:
    """Mean structural similarity on luminance, L=1, valid positions only."""
    a, b = _check_pair(a, b)
    x = luminance(a) if a.ndim == 3 else a
    y = luminance(b) if b.ndim == 3 else b
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    sxx = convolve2d(x * x, w, mode="valid") - mu_x ** 2
    syy = convolve2d(y * y, w, mode="valid") - mu_y ** 2
    sxy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
