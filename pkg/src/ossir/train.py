"""L1 training loop with Adam, cosine decay and a progressive patch schedule."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, nn, ops
from .data import PatchPair, random_crops
from .errors import ConfigError, NonFiniteError
from .metrics import psnr, ssim
from .model import Model, coerce, parse_kv
from .optim import Adam, cosine_lr
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    iterations: int = 2000
    batch: int = 4
    patch_schedule: list = field(default_factory=lambda: [48])
    min_lr: float = 1e-6
    log_every: int = 100
    eval_every: int = 0  # 0: evaluate only at the end
    loss_window: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 < b < 1 for b in self.betas):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if self.iterations < 1 or self.batch < 1 or not self.patch_schedule:
            raise ConfigError("iterations, batch and patch_schedule must be positive/non-empty")
        if any(p % 8 for p in self.patch_schedule):
            raise ConfigError(f"patch sizes must be multiples of 8, got {self.patch_schedule}")

    def updated(self, kv: dict[str, str]) -> "TrainConfig":
        out = TrainConfig(**vars(self))
        for key, raw in kv.items():
            if not hasattr(out, key):
                raise ConfigError(f"unknown train config key {key!r}")
            setattr(out, key, coerce(raw, getattr(self, key)))
        return out

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls().updated(parse_kv(text))

    def patch_at(self, it: int) -> int:
        """Patch size for 0-based iteration ``it``: the schedule splits the run evenly."""
        k = len(self.patch_schedule)
        return int(self.patch_schedule[min(it * k // self.iterations, k - 1)])


@dataclass
class EvalResult:
    psnr: float
    ssim: float
    baseline_psnr: float
    baseline_ssim: float


@dataclass
class TrainResult:
    losses: list[float]
    log_rows: list[tuple[int, float, float, float]]
    final: EvalResult | None
    seconds: float

    def smoothed_loss(self, it: int, window: int = 20) -> float:
        """Mean training loss over the ``window`` iterations ending at 1-based ``it``."""
        lo = max(0, it - window)
        return float(np.mean(self.losses[lo:it]))


def evaluate(model: Model, pairs: list[PatchPair]) -> EvalResult:
    """Mean Y-channel PSNR/SSIM of model outputs, and of the raw degraded input."""
    dt = model.config.np_dtype
    ps, ss, bp, bs = [], [], [], []
    with no_grad():
        for p in pairs:
            out = model(Tensor(p.lq[None].astype(dt))).data[0].astype(np.float64)
            out = np.clip(out, 0.0, 1.0)
            ps.append(psnr(out, p.hq))
            ss.append(ssim(out, p.hq))
            if p.lq.shape == p.hq.shape:
                bp.append(psnr(p.lq, p.hq))
                bs.append(ssim(p.lq, p.hq))
    nan = float("nan")
    return EvalResult(float(np.mean(ps)), float(np.mean(ss)),
                      float(np.mean(bp)) if bp else nan, float(np.mean(bs)) if bs else nan)


def locate_nonfinite(model: Model, x: Tensor) -> str | None:
    """Rerun the forward pass and name the first module whose output is non-finite."""
    names = {id(m): n for n, m in model.named_modules()}
    found: list[str] = []

    def hook(mod, out):
        if found or not isinstance(out, Tensor):
            return
        if not np.all(np.isfinite(out.data)):
            found.append(names.get(id(mod), type(mod).__name__))

    nn._watch["hook"] = hook
    try:
        with no_grad():
            model(x)
    finally:
        nn._watch.pop("hook", None)
    return found[0] if found else None


def train(model: Model, dataset: list[PatchPair], cfg: TrainConfig, eval_set: list[PatchPair] | None = None,
          log_path: str | Path | None = None, checkpoint_path: str | Path | None = None) -> TrainResult:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dt = model.config.np_dtype
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    losses: list[float] = []
    rows: list[tuple[int, float, float, float]] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss", "psnr", "ssim"])
    final = None
    t0 = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            lq, hq = random_crops(dataset, cfg.batch, cfg.patch_at(it), rng)
            x = Tensor(lq.astype(dt))
            loss = ops.l1_loss(model(x), Tensor(hq.astype(dt)))
            value = loss.item()
            if not np.isfinite(value):
                where = locate_nonfinite(model, x)
                raise NonFiniteError(f"non-finite loss at iteration {it + 1}; first non-finite output in "
                                     f"{where or 'the loss itself'}", where)
            opt.zero_grad()
            backward(loss)
            opt.step(cosine_lr(it, cfg.iterations, cfg.lr, min(cfg.min_lr, cfg.lr)))
            losses.append(value)
            n = it + 1
            last = n == cfg.iterations
            if n % cfg.log_every == 0 or last:
                do_eval = eval_set and (last or (cfg.eval_every and n % cfg.eval_every == 0))
                ev = evaluate(model, eval_set) if do_eval else None
                if last:
                    final = ev
                row = (n, float(np.mean(losses[-cfg.loss_window:])),
                       ev.psnr if ev else float("nan"), ev.ssim if ev else float("nan"))
                rows.append(row)
                if writer:
                    writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.4f}", f"{row[3]:.5f}"])
                    fh.flush()
                log.info("iter %d loss %.5f psnr %.3f ssim %.4f", *row)
    finally:
        if fh:
            fh.close()
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, model)
    return TrainResult(losses, rows, final, time.perf_counter() - t0)
