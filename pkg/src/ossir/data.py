"""Procedural image corpus, rain synthesis and bicubic downsampling.

Every image is a pure function of its seed, so a dataset can be rebuilt
bit-for-bit from ``(seed, index)`` alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, DomainError


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

def _colors(rng, k):
    return rng.uniform(0.05, 0.85, size=(k, 3))


def gradient_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    theta = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = xx * math.cos(theta) + yy * math.sin(theta)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    c0, c1 = _colors(rng, 2)
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def checker_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    cell = int(rng.integers(4, 17))
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    c0, c1 = _colors(rng, 2)
    return c0[:, None, None] * (1 - mask) + c1[:, None, None] * mask


def noise_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    sigma = rng.uniform(1.5, 5.0)
    field = ndimage.gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, sigma, sigma), mode="wrap")
    field -= field.mean(axis=(1, 2), keepdims=True)
    field /= field.std(axis=(1, 2), keepdims=True) + 1e-12
    base = _colors(rng, 1)[0]
    return base[:, None, None] + 0.12 * field


TEXTURES = (gradient_texture, checker_texture, noise_texture)


def clean_image(seed: int, size: int = 64) -> np.ndarray:
    """A ``[3, size, size]`` image in ``[0, 1]``: one texture family blended with a second."""
    rng = _rng(seed, 0)
    kinds = rng.permutation(len(TEXTURES))[:2]
    img = TEXTURES[kinds[0]](rng, size)
    other = TEXTURES[kinds[1]](rng, size)
    w = rng.uniform(0.0, 0.4)
    return np.clip((1 - w) * img + w * other, 0.0, 1.0)


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

def streak_layer(h: int, w: int, seed: int, density: float, angle_deg: float, length: float,
                 intensity: float) -> np.ndarray:
    """Single-channel additive rain layer of ``round(density*h*w)`` line segments.

    ``angle_deg`` is measured from the vertical; each streak gets a Gaussian
    jitter on its brightness (clamped to be nonnegative).
    """
    rng = _rng(seed, 1)
    layer = np.zeros((h, w))
    count = int(round(density * h * w))
    if count == 0:
        return layer
    theta = math.radians(angle_deg)
    dy, dx = math.cos(theta), math.sin(theta)
    steps = np.arange(0.0, max(length, 1.0), 0.5)
    y0 = rng.uniform(-length, h, count)
    x0 = rng.uniform(-length, w, count)
    amp = np.maximum(rng.normal(intensity, 0.25 * intensity, count), 0.0)
    ys = np.rint(y0[:, None] + dy * steps).astype(np.int64)
    xs = np.rint(x0[:, None] + dx * steps).astype(np.int64)
    inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    vals = np.broadcast_to(amp[:, None], ys.shape)
    # a segment can revisit a pixel after rounding; keep the brightest hit
    np.maximum.at(layer, (ys[inside], xs[inside]), vals[inside])
    return layer


def synth_rain(clean: np.ndarray, seed: int, density: float = 0.01, angle_deg: float = 10.0,
               length: float = 8.0, intensity: float = 0.5) -> np.ndarray:
    """``clip(clean + streaks, 0, 1)`` with the same streaks on every color channel."""
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise DimensionError(f"synth_rain expects [3,H,W], got {clean.shape}")
    if clean.min() < 0 or clean.max() > 1:
        raise DomainError("synth_rain: clean image must lie in [0, 1]")
    if density <= 0:
        return clean.copy()
    layer = streak_layer(clean.shape[1], clean.shape[2], seed, density, angle_deg, length, intensity)
    return np.clip(clean + layer[None], 0.0, 1.0)


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(n_in: int, factor: int) -> np.ndarray:
    """``[n_in/factor, n_in]`` antialiased bicubic reduction along one axis.

    The kernel is stretched by ``factor`` and boundaries use odd reflection
    (``2 f(edge) - f(mirror)``), which reproduces linear signals exactly.
    """
    n_out = n_in // factor
    m = np.zeros((n_out, n_in))
    support = 2 * factor
    for i in range(n_out):
        center = (i + 0.5) * factor - 0.5
        taps = np.arange(math.floor(center - support) + 1, math.ceil(center + support))
        wts = _cubic((taps - center) / factor)
        wts /= wts.sum()
        for j, wt in zip(taps, wts):
            if j < 0:
                m[i, 0] += 2 * wt
                m[i, -j] -= wt
            elif j >= n_in:
                m[i, n_in - 1] += 2 * wt
                m[i, 2 * (n_in - 1) - j] -= wt
            else:
                m[i, j] += wt
    return m


def bicubic_down4(hq: np.ndarray) -> np.ndarray:
    """Downsample ``[3, H, W]`` by 4 (bicubic, a=-0.5, antialiased), clipped to [0, 1]."""
    if hq.ndim != 3 or hq.shape[1] % 4 or hq.shape[2] % 4:
        raise DimensionError(f"bicubic_down4 needs [C,H,W] with H, W divisible by 4, got {hq.shape}")
    mh = resize_matrix(hq.shape[1], 4)
    mw = resize_matrix(hq.shape[2], 4)
    out = np.einsum("ih,chw,jw->cij", mh, hq, mw)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RainParams:
    density: float = 0.01
    angle_range: float = 20.0
    length: float = 8.0
    intensity: float = 0.5


@dataclass
class PatchPair:
    lq: np.ndarray  # [3, h, w]
    hq: np.ndarray  # [3, H, W]
    seed: int
    task: str

    def check(self) -> None:
        _, h, w = self.lq.shape
        _, H, W = self.hq.shape
        want = (h, w) if self.task == "residual" else (4 * h, 4 * w)
        if (H, W) != want:
            raise DimensionError(f"{self.task} pair: lq {self.lq.shape} vs hq {self.hq.shape}")


def make_pair(seed: int, size: int = 64, task: str = "residual", rain: RainParams = RainParams()) -> PatchPair:
    hq = clean_image(seed, size)
    if task == "residual":
        angle = _rng(seed, 2).uniform(-rain.angle_range, rain.angle_range)
        lq = synth_rain(hq, seed, rain.density, angle, rain.length, rain.intensity)
    elif task == "sr4x":
        lq = bicubic_down4(hq)
    else:
        raise DomainError(f"unknown task {task!r}")
    return PatchPair(lq, hq, seed, task)


def make_dataset(count: int = 32, size: int = 64, task: str = "residual", seed: int = 0,
                 rain: RainParams = RainParams()) -> list[PatchPair]:
    """``count`` pairs; pair ``i`` depends only on ``(seed, i)``."""
    base = int(np.random.SeedSequence(seed).generate_state(1)[0])
    return [make_pair(base + i, size, task, rain) for i in range(count)]


def random_crops(pairs: list[PatchPair], batch: int, patch: int, rng: np.random.Generator):
    """Stack ``batch`` aligned random crops; ``patch`` is the HQ crop size."""
    lqs, hqs = [], []
    for k in rng.integers(0, len(pairs), batch):
        p = pairs[k]
        scale = p.hq.shape[1] // p.lq.shape[1]
        lp = patch // scale
        _, h, w = p.lq.shape
        if lp > h or lp > w:
            raise DimensionError(f"patch {patch} larger than image {p.hq.shape[1:]}")
        y, x = rng.integers(0, h - lp + 1), rng.integers(0, w - lp + 1)
        lqs.append(p.lq[:, y:y + lp, x:x + lp])
        hqs.append(p.hq[:, y * scale:(y + lp) * scale, x * scale:(x + lp) * scale])
    return np.stack(lqs), np.stack(hqs)
