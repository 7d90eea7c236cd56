"""PSNR and SSIM on the luma (Y) channel.

Y uses full-range BT.601 weights on images scaled to ``[0, 1]``.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DimensionError

Y_WEIGHTS = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` (or ``[B, 3, H, W]``) RGB -> ``[H, W]`` luma."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 3 or img.shape[-3] != 3:
        raise DimensionError(f"expected an RGB image [..., 3, H, W], got {img.shape}")
    return np.tensordot(Y_WEIGHTS, np.moveaxis(img, -3, 0), axes=1)


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return rgb_to_y(a), rgb_to_y(b)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    ya, yb = _pair(a, b)
    mse = float(np.mean((ya - yb) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, keeping only windows that fit entirely
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=-1, mode="constant")
    out = ndimage.correlate1d(out, g, axis=-2, mode="constant")
    return out[..., r:-r or None, r:-r or None]


def ssim_map(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """SSIM at every fully-covered window position of two luma planes."""
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    g = gaussian_window()
    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    ya, yb = _pair(a, b)
    return float(ssim_map(ya, yb, peak).mean())
