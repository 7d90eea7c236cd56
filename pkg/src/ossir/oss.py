"""Omni selective scan: six scan directions, OSS module, EFFN and OSS block.

Planar scan orders (documented constants, pinned by tests):

* ``H_FORWARD``  -- row-major from the top-left pixel ``(0, 0)``.
* ``W_FORWARD``  -- column-major starting at the bottom-left ``(H-1, 0)``,
  moving up each column, columns left to right.
* ``*_BACKWARD`` -- the exact reversal of the matching forward order.

Channel directions scan the channel axis front-to-back (``C_FORWARD``) or
back-to-front (``C_BACKWARD``); every spatial site is its own sequence.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv2d, DWConv2d, LayerNorm, Module
from .ssm import SelectiveSSM
from .tensor import Tensor


class Direction(enum.Enum):
    H_FORWARD = "h_forward"
    H_BACKWARD = "h_backward"
    W_FORWARD = "w_forward"
    W_BACKWARD = "w_backward"
    C_FORWARD = "c_forward"
    C_BACKWARD = "c_backward"

    @property
    def planar(self) -> bool:
        return self in PLANAR


PLANAR = (Direction.H_FORWARD, Direction.H_BACKWARD, Direction.W_FORWARD, Direction.W_BACKWARD)
CHANNEL = (Direction.C_FORWARD, Direction.C_BACKWARD)


@lru_cache(maxsize=256)
def _index_map(direction: Direction, h: int, w: int, c: int) -> np.ndarray:
    if direction in (Direction.H_FORWARD, Direction.H_BACKWARD):
        order = np.arange(h * w)
    elif direction in (Direction.W_FORWARD, Direction.W_BACKWARD):
        rows = np.arange(h - 1, -1, -1)
        order = (rows[None, :] * w + np.arange(w)[:, None]).reshape(-1)
    else:
        order = np.arange(c)
    if direction in (Direction.H_BACKWARD, Direction.W_BACKWARD, Direction.C_BACKWARD):
        order = order[::-1]
    order = np.ascontiguousarray(order)
    order.setflags(write=False)
    return order


@dataclass(frozen=True)
class DirectionalView:
    """Bijective serialization of a feature map along one scan direction.

    ``index_map[k]`` is the source index of sequence position ``k``: a flat
    ``h * W + w`` pixel index for planar directions, a channel index otherwise.
    """

    direction: Direction
    height: int
    width: int
    channels: int
    index_map: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index_map",
                           _index_map(self.direction, self.height, self.width, self.channels))

    @classmethod
    def of(cls, x: Tensor, direction: Direction) -> "DirectionalView":
        _, c, h, w = x.shape
        return cls(direction, h, w, c)

    def serialize(self, x: Tensor) -> Tensor:
        """Planar: ``[B,C,H,W] -> [B, H*W, C]``; channel: ``[B,C,H,W] -> [B*H*W, C, 1]``."""
        b, c, h, w = x.shape
        if (c, h, w) != (self.channels, self.height, self.width):
            raise DimensionError(f"view built for {(self.channels, self.height, self.width)}, got {(c, h, w)}")
        if self.direction.planar:
            seq = ops.permute(ops.reshape(x, (b, c, h * w)), (0, 2, 1))
            if self.direction is not Direction.H_FORWARD:
                seq = ops.take(seq, self.index_map, axis=1)
            return seq
        seq = ops.reshape(ops.permute(x, (0, 2, 3, 1)), (b * h * w, c, 1))
        if self.direction is Direction.C_BACKWARD:
            seq = ops.flip(seq, 1)
        return seq

    def deserialize(self, seq: Tensor) -> Tensor:
        """Exact inverse of :meth:`serialize`."""
        c, h, w = self.channels, self.height, self.width
        if self.direction.planar:
            b = seq.shape[0]
            if seq.shape != (b, h * w, c):
                raise DimensionError(f"deserialize: expected [B,{h * w},{c}], got {seq.shape}")
            if self.direction is not Direction.H_FORWARD:
                inv = np.empty_like(self.index_map)
                inv[self.index_map] = np.arange(inv.size)
                seq = ops.take(seq, inv, axis=1)
            return ops.reshape(ops.permute(seq, (0, 2, 1)), (b, c, h, w))
        bhw = seq.shape[0]
        if seq.shape != (bhw, c, 1) or bhw % (h * w):
            raise DimensionError(f"deserialize: expected [B*{h * w},{c},1], got {seq.shape}")
        if self.direction is Direction.C_BACKWARD:
            seq = ops.flip(seq, 1)
        return ops.permute(ops.reshape(seq, (bhw // (h * w), h, w, c)), (0, 3, 1, 2))


def serialize(x: Tensor, direction: Direction) -> Tensor:
    return DirectionalView.of(x, direction).serialize(x)


def deserialize(seq: Tensor, direction: Direction, shape: tuple[int, int, int, int]) -> Tensor:
    _, c, h, w = shape
    return DirectionalView(direction, h, w, c).deserialize(seq)


# ---------------------------------------------------------------------------
# scans over feature maps
# ---------------------------------------------------------------------------

def plane_scan(f: Tensor, ssms: list[SelectiveSSM], directions=PLANAR) -> Tensor:
    """Sum over directions of ``deserialize(ssm(serialize(f)))``.

    ``ssms`` has one entry per direction, or a single entry shared by all
    directions (then the sequences are stacked along the batch axis).
    """
    views = [DirectionalView.of(f, d) for d in directions]
    if len(ssms) == 1 and len(views) > 1:
        stacked = ops.concat([v.serialize(f) for v in views], axis=0)
        outs = ops.split(ssms[0](stacked), 0, len(views))
        parts = [v.deserialize(o) for v, o in zip(views, outs)]
    else:
        if len(ssms) != len(views):
            raise ConfigError(f"{len(ssms)} scan modules for {len(views)} directions")
        parts = [v.deserialize(m(v.serialize(f))) for v, m in zip(views, ssms)]
    total = parts[0]
    for p in parts[1:]:
        total = ops.add(total, p)
    return total


def channel_scan(g: Tensor, ssm: SelectiveSSM) -> Tensor:
    """Pool to ``[B,C,1,1]`` and scan the channels both ways with one shared SSM."""
    b, c, _, _ = g.shape
    pooled = ops.global_avg_pool(g)
    fwd_view = DirectionalView(Direction.C_FORWARD, 1, 1, c)
    bwd_view = DirectionalView(Direction.C_BACKWARD, 1, 1, c)
    seqs = ops.concat([fwd_view.serialize(pooled), bwd_view.serialize(pooled)], axis=0)
    yf, yb = ops.split(ssm(seqs), 0, 2)
    return ops.add(fwd_view.deserialize(yf), bwd_view.deserialize(yb))


FUSIONS = ("gate", "add")


def fuse_channel(g: Tensor, f_oc: Tensor, mode: str = "gate") -> Tensor:
    """Residual fusion of planar features ``g`` with channel summary ``f_oc``."""
    if mode == "gate":
        return ops.add(g, ops.mul(g, ops.sigmoid(f_oc)))
    if mode == "add":
        b, c, h, w = g.shape
        ones = Tensor(np.ones((b, c, h, w), dtype=g.dtype))
        return ops.add(g, ops.mul(ones, f_oc))
    raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSIONS}")


def oss_scan(f_o1: Tensor, f_o2: Tensor, plane_ssms: list[SelectiveSSM],
             chan_ssm: SelectiveSSM | None, directions=PLANAR, fusion: str = "gate") -> Tensor:
    if f_o1.shape != f_o2.shape:
        raise DimensionError(f"oss_scan: stream shapes differ {f_o1.shape} vs {f_o2.shape}")
    g = ops.mul(plane_scan(f_o1, plane_ssms, directions), f_o2)
    if chan_ssm is None:
        return g
    return fuse_channel(g, channel_scan(g, chan_ssm), fusion)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class OssModule(Module):
    """1x1 conv into two streams, omni selective scan, 1x1 conv out.

    Stream one gets a depth-wise 3x3 conv and SiLU, stream two only SiLU.
    ``expand`` widens the streams to ``expand * C`` channels each.
    """

    def __init__(self, channels: int, rng: np.random.Generator, *, expand: int = 2, state: int = 16,
                 channel_state: int = 8, omni_scan: bool = True, channel_scan: bool = True,
                 shared_scan: bool = False, fusion: str = "gate", dt_rank_div: int = 4,
                 exact_zoh: bool = True, dtype=np.float32):
        if fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion mode {fusion!r}")
        inner = expand * channels
        self.channels, self.inner, self.fusion = channels, inner, fusion
        self.directions = PLANAR if omni_scan else (Direction.H_FORWARD,)
        self.in_conv = Conv2d(channels, 2 * inner, 1, rng, dtype)
        self.dwconv = DWConv2d(inner, 3, rng, dtype)
        n_plane = 1 if shared_scan else len(self.directions)
        dt_rank = -(-inner // dt_rank_div) if dt_rank_div else None
        self.plane_ssms = [SelectiveSSM(inner, state, rng, dtype, dt_rank, exact_zoh) for _ in range(n_plane)]
        self.chan_ssm = SelectiveSSM(1, channel_state, rng, dtype, None, exact_zoh) if channel_scan else None
        self.out_conv = Conv2d(inner, channels, 1, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        s1, s2 = ops.split(self.in_conv(x), 1, 2)
        f_o1 = ops.silu(self.dwconv(s1))
        f_o2 = ops.silu(s2)
        f_oss = oss_scan(f_o1, f_o2, self.plane_ssms, self.chan_ssm, self.directions, self.fusion)
        return self.out_conv(f_oss)

    def flops(self, h: int, w: int) -> int:
        n = self.in_conv.flops(h, w) + self.dwconv.flops(h, w) + self.out_conv.flops(h, w)
        per_dir = self.plane_ssms[0].flops(h * w)
        n += per_dir * len(self.directions)
        if self.chan_ssm is not None:
            n += 2 * self.chan_ssm.flops(self.inner)
        return n


class Effn(Module):
    """Gated feed-forward: 1x1 expand, depth-wise 3x3, ``g1 * silu(g2)``, 1x1 project."""

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 2, dtype=np.float32):
        hidden = expansion * channels
        self.expand = Conv2d(channels, 2 * hidden, 1, rng, dtype)
        self.dwconv = DWConv2d(2 * hidden, 3, rng, dtype)
        self.project = Conv2d(hidden, channels, 1, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        g1, g2 = ops.split(self.dwconv(self.expand(x)), 1, 2)
        return self.project(ops.mul(g1, ops.silu(g2)))

    def flops(self, h: int, w: int) -> int:
        return self.expand.flops(h, w) + self.dwconv.flops(h, w) + self.project.flops(h, w)


class OssBlock(Module):
    """Pre-norm residual block: ``y1 = x + oss(ln(x))``, ``y = y1 + effn(ln(y1))``."""

    def __init__(self, channels: int, rng: np.random.Generator, *, effn: bool = True,
                 effn_expansion: int = 2, dtype=np.float32, **oss_kwargs):
        self.norm1 = LayerNorm(channels, dtype)
        self.oss = OssModule(channels, rng, dtype=dtype, **oss_kwargs)
        if effn:
            self.norm2 = LayerNorm(channels, dtype)
            self.effn = Effn(channels, rng, effn_expansion, dtype)
        else:
            self.effn = None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.add(x, self.oss(self.norm1(x)))
        if self.effn is not None:
            y = ops.add(y, self.effn(self.norm2(y)))
        return y

    def flops(self, h: int, w: int) -> int:
        return self.oss.flops(h, w) + (self.effn.flops(h, w) if self.effn is not None else 0)
