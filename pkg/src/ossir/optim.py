"""Adam with bias correction, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8) -> AdamState:
    """One in-place Adam update. A ``None`` gradient counts as zero."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= upd.astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.99), eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        if not all(0 < b < 1 for b in betas):
            raise ValueError(f"betas must lie in (0, 1), got {betas}")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, lr: float | None = None) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(it: int, total: int, base: float, floor: float = 0.0) -> float:
    """Cosine annealing from ``base`` at ``it=0`` to ``floor`` at ``it=total``."""
    if total <= 0:
        return base
    frac = min(max(it / total, 0.0), 1.0)
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * frac))
