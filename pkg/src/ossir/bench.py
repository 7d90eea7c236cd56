"""Wall-clock scaling of one OSS block forward pass."""

from __future__ import annotations

import ctypes
import ctypes.util
import time
from dataclasses import dataclass

import numpy as np

from .oss import OssBlock
from .tensor import Tensor, no_grad

# H*W doubles at every step
DEFAULT_SIZES = ((32, 32), (32, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256))


@dataclass
class ScalingResult:
    """Bench timings; ``sweeps[r, i]`` is the time of size ``i`` in sweep ``r``.

    The host speed can shift by tens of percent between sweeps, so ratios and
    the slope are taken within each sweep, then the median across sweeps.
    """

    rows: list[tuple[int, float]]  # (pixels, median seconds)
    slope: float
    sweeps: np.ndarray | None = None

    @property
    def ratios(self) -> list[float]:
        if self.sweeps is None:
            return [b[1] / a[1] for a, b in zip(self.rows, self.rows[1:])]
        return [float(r) for r in np.median(self.sweeps[:, 1:] / self.sweeps[:, :-1], axis=0)]

    def to_csv(self) -> str:
        lines = ["pixels,seconds"] + [f"{p},{s:.6f}" for p, s in self.rows]
        return "\n".join(lines) + "\n"


_M_TRIM_THRESHOLD, _M_MMAP_THRESHOLD = -1, -3


def steady_allocator() -> bool:
    """Pin glibc's malloc thresholds for the rest of the process.

    By default glibc moves its mmap threshold up as large blocks are freed, so
    whether a given buffer is recycled from the heap or freshly mapped (and
    page faulted) depends on what ran before. That shows up as tens of percent
    in the per-size cost. Returns False where mallopt is unavailable.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    # 32 MiB is the largest mmap threshold glibc accepts on 64-bit
    return bool(mallopt(_M_MMAP_THRESHOLD, 32 << 20)) and bool(mallopt(_M_TRIM_THRESHOLD, 1 << 30))


def loglog_slope(pixels, seconds) -> float:
    return float(np.polyfit(np.log(pixels), np.log(seconds), 1)[0])


def bench_scaling(sizes=DEFAULT_SIZES, channels: int = 32, repeats: int = 5, warmup: int = 1,
                  seed: int = 0, **block_kw) -> ScalingResult:
    """Median forward time of one OSS block for each ``(H, W)`` in ``sizes``.

    Each repeat sweeps the whole ladder, so slow drift in machine load lands on
    every size alike instead of on whichever size happened to be running.
    Within a sweep every timed call follows ``warmup`` untimed calls at the
    same size; otherwise the small sizes are timed on caches just flushed by
    the largest one.
    """
    steady_allocator()
    rng = np.random.default_rng(seed)
    block = OssBlock(channels, rng, **block_kw)
    inputs = [Tensor(rng.random((1, channels, h, w)).astype(np.float32)) for h, w in sizes]
    times = np.empty((repeats, len(sizes)))
    with no_grad():
        for r in range(repeats):
            for i, x in enumerate(inputs):
                for _ in range(warmup):
                    block(x)
                t = time.perf_counter()
                block(x)
                times[r, i] = time.perf_counter() - t
    pixels = [h * w for h, w in sizes]
    rows = list(zip(pixels, (float(t) for t in np.median(times, axis=0))))
    slope = float(np.median([loglog_slope(pixels, sweep) for sweep in times]))
    return ScalingResult(rows, slope, times)
