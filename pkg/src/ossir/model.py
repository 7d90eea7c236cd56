"""UNet of OSS blocks with parameter and FLOP accounting."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module
from .oss import OssBlock
from .tensor import Tensor

TASKS = ("residual", "sr4x")
_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass
class ModelConfig:
    dims: list[int] = field(default_factory=lambda: [48, 96, 192, 384])
    enc_blocks: list[int] = field(default_factory=lambda: [6, 2, 2, 1])
    refine_blocks: int = 6
    task: str = "sr4x"
    state: int = 16
    channel_state: int = 8
    ssm_expand: int = 2
    effn_expansion: int = 2
    dt_rank_div: int = 4  # step projection rank = ceil(inner / div); 0 -> full rank
    omni_scan: bool = True
    channel_scan: bool = True
    effn: bool = True
    shared_scan: bool = False
    fusion: str = "gate"
    exact_zoh: bool = True
    enforce_doubling: bool = True
    dtype: str = "f32"
    seed: int = 0

    @classmethod
    def real_sr(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def sisr(cls, **kw) -> "ModelConfig":
        return cls(**{"enc_blocks": [14, 1, 1, 1], "refine_blocks": 14, **kw})

    @classmethod
    def derain(cls, **kw) -> "ModelConfig":
        return cls(**{"enc_blocks": [4, 4, 6, 8], "refine_blocks": 2, "task": "residual", **kw})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        return cls(**{"dims": [8, 16, 32, 64], "enc_blocks": [1, 1, 1, 1], "refine_blocks": 1,
                      "task": "residual", **kw})

    def validate(self) -> None:
        if len(self.dims) != 4 or any(d < 1 for d in self.dims):
            raise ConfigError(f"dims must be 4 positive extents, got {self.dims}")
        if self.enforce_doubling and any(self.dims[i + 1] != 2 * self.dims[i] for i in range(3)):
            raise ConfigError(f"dims must double per level, got {self.dims}")
        if len(self.enc_blocks) != 4 or any(n < 1 for n in self.enc_blocks):
            raise ConfigError(f"enc_blocks must be 4 positive counts, got {self.enc_blocks}")
        if self.refine_blocks < 0:
            raise ConfigError("refine_blocks must be >= 0")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if min(self.state, self.channel_state, self.ssm_expand, self.effn_expansion) < 1 or self.dt_rank_div < 0:
            raise ConfigError("state sizes and expansion factors must be >= 1")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    # key=value text form, used by checkpoints and the CLI
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls().updated(parse_kv(text))

    def updated(self, kv: dict[str, str]) -> "ModelConfig":
        types = {f.name: f for f in dataclasses.fields(self)}
        out = dataclasses.replace(self)
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            setattr(out, key, coerce(raw, getattr(self, key)))
        return out


def parse_kv(text: str) -> dict[str, str]:
    kv = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    try:
        if isinstance(like, list):
            return [type(like[0])(x) for x in raw.split(",") if x.strip()] if like else raw.split(",")
        if isinstance(like, tuple):
            return tuple(type(like[0])(x) for x in raw.split(","))
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r}: {exc}") from None
    return raw


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class Downsample(Module):
    """``[C, H, W] -> [2C, H/2, W/2]``: pixel-unshuffle then 1x1 conv."""

    def __init__(self, cin: int, cout: int, rng, dtype):
        self.conv = Conv2d(4 * cin, cout, 1, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"downsample needs even extents, got {h}x{w}")
        return self.conv(ops.pixel_unshuffle(x, 2))

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h // 2, w // 2)


class Upsample(Module):
    """``[2C, H, W] -> [C, 2H, 2W]``: 1x1 conv then pixel-shuffle."""

    def __init__(self, cin: int, cout: int, rng, dtype):
        self.conv = Conv2d(cin, 4 * cout, 1, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.pixel_shuffle(self.conv(x), 2)

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h, w)


class SkipFuse(Module):
    """Concatenate encoder skip and decoder features, 1x1 conv back to the level width."""

    def __init__(self, channels: int, rng, dtype):
        self.conv = Conv2d(2 * channels, channels, 1, rng, dtype)

    def forward(self, skip: Tensor, dec: Tensor) -> Tensor:
        if skip.shape[2:] != dec.shape[2:]:
            raise DimensionError(f"skip_fuse: spatial mismatch {skip.shape} vs {dec.shape}")
        return self.conv(ops.concat([skip, dec], axis=1))

    def flops(self, h: int, w: int) -> int:
        return self.conv.flops(h, w)


class Tail(Module):
    def __init__(self, channels: int, task: str, rng, dtype):
        self.task = task
        if task == "residual":
            self.convs = [Conv2d(channels, 3, 3, rng, dtype)]
        else:
            self.convs = [Conv2d(channels, 4 * channels, 3, rng, dtype),
                          Conv2d(channels, 4 * channels, 3, rng, dtype),
                          Conv2d(channels, 3, 3, rng, dtype)]

    def forward(self, x: Tensor) -> Tensor:
        if self.task == "residual":
            return self.convs[0](x)
        x = ops.pixel_shuffle(self.convs[0](x), 2)
        x = ops.pixel_shuffle(self.convs[1](x), 2)
        return self.convs[2](x)

    def flops(self, h: int, w: int) -> int:
        if self.task == "residual":
            return self.convs[0].flops(h, w)
        return self.convs[0].flops(h, w) + self.convs[1].flops(2 * h, 2 * w) + self.convs[2].flops(4 * h, 4 * w)


class Model(Module):
    """Shallow conv, 3-level encoder/decoder with skips, bottleneck, refinement, tail."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dt = config.np_dtype
        d = config.dims
        block_kw = dict(
            effn=config.effn, effn_expansion=config.effn_expansion, dtype=dt,
            expand=config.ssm_expand, state=config.state, channel_state=config.channel_state,
            omni_scan=config.omni_scan, channel_scan=config.channel_scan,
            shared_scan=config.shared_scan, fusion=config.fusion,
            dt_rank_div=config.dt_rank_div, exact_zoh=config.exact_zoh,
        )

        def blocks(width, n):
            return [OssBlock(width, rng, **block_kw) for _ in range(n)]

        self.shallow = Conv2d(3, d[0], 3, rng, dt)
        self.encoders = [blocks(d[i], config.enc_blocks[i]) for i in range(3)]
        self.downs = [Downsample(d[i], d[i + 1], rng, dt) for i in range(3)]
        self.bottleneck = blocks(d[3], config.enc_blocks[3])
        self.ups = [Upsample(d[i + 1], d[i], rng, dt) for i in (2, 1, 0)]
        self.fuses = [SkipFuse(d[i], rng, dt) for i in (2, 1, 0)]
        self.decoders = [blocks(d[i], config.enc_blocks[i]) for i in (2, 1, 0)]
        self.refine = blocks(d[0], config.refine_blocks)
        self.tail = Tail(d[0], config.task, rng, dt)

    # nested block lists are flattened for parameter discovery
    def named_parameters(self, prefix: str = ""):
        for name, mod in self._children():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def named_modules(self, prefix: str = ""):
        yield "model", self
        for name, mod in self._children():
            yield from mod.named_modules(f"{prefix}{name}.")

    def _children(self):
        yield "shallow", self.shallow
        for i, level in enumerate(self.encoders):
            for j, blk in enumerate(level):
                yield f"encoders.{i}.{j}", blk
            yield f"downs.{i}", self.downs[i]
        for j, blk in enumerate(self.bottleneck):
            yield f"bottleneck.{j}", blk
        for i in range(3):
            yield f"ups.{i}", self.ups[i]
            yield f"fuses.{i}", self.fuses[i]
            for j, blk in enumerate(self.decoders[i]):
                yield f"decoders.{i}.{j}", blk
        for j, blk in enumerate(self.refine):
            yield f"refine.{j}", blk
        yield "tail", self.tail

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != 3:
            raise DimensionError(f"model expects 3 input channels, got {c}")
        if h % 8 or w % 8:
            raise DimensionError(f"input extents {h}x{w} must be multiples of 8")
        f = self.shallow(x)
        skips = []
        for level, down in zip(self.encoders, self.downs):
            for blk in level:
                f = blk(f)
            skips.append(f)
            f = down(f)
        for blk in self.bottleneck:
            f = blk(f)
        for up, fuse, level, skip in zip(self.ups, self.fuses, self.decoders, reversed(skips)):
            f = fuse(skip, up(f))
            for blk in level:
                f = blk(f)
        for blk in self.refine:
            f = blk(f)
        out = self.tail(f)
        if self.config.task == "residual":
            out = ops.add(x, out)
        return out

    def flop_rows(self, h: int, w: int) -> list[tuple[str, int]]:
        rows = [("shallow", self.shallow.flops(h, w))]
        for i in range(3):
            s = 2 ** i
            for j, blk in enumerate(self.encoders[i]):
                rows.append((f"encoders.{i}.{j}", blk.flops(h // s, w // s)))
            rows.append((f"downs.{i}", self.downs[i].flops(h // s, w // s)))
        for j, blk in enumerate(self.bottleneck):
            rows.append((f"bottleneck.{j}", blk.flops(h // 8, w // 8)))
        for k, i in enumerate((2, 1, 0)):
            s = 2 ** i
            rows.append((f"ups.{k}", self.ups[k].flops(h // (2 * s), w // (2 * s))))
            rows.append((f"fuses.{k}", self.fuses[k].flops(h // s, w // s)))
            for j, blk in enumerate(self.decoders[k]):
                rows.append((f"decoders.{k}.{j}", blk.flops(h // s, w // s)))
        for j, blk in enumerate(self.refine):
            rows.append((f"refine.{j}", blk.flops(h, w)))
        rows.append(("tail", self.tail.flops(h, w)))
        return rows


def build(config: ModelConfig) -> Model:
    return Model(config)


@dataclass
class FlopReport:
    params: int
    flops: int
    input_hw: tuple[int, int]
    rows: list[tuple[str, int, int]]  # (module, params, flops)

    def format(self, ref_params_m: float | None = None, ref_gflops: float | None = None) -> str:
        h, w = self.input_hw
        lines = [f"{'module':<24}{'params':>12}{'GFLOPs':>12}"]
        for name, p, f in self.rows:
            lines.append(f"{name:<24}{p:>12d}{f / 1e9:>12.4f}")
        lines.append(f"{'total':<24}{self.params:>12d}{self.flops / 1e9:>12.4f}")
        lines.append(f"params {self.params / 1e6:.2f} M, FLOPs {self.flops / 1e9:.2f} G at {h}x{w}")
        if ref_params_m is not None:
            gap = self.params / 1e6 - ref_params_m
            lines.append(f"reference params {ref_params_m:.2f} M, gap {gap:+.2f} M ({100 * gap / ref_params_m:+.1f}%)")
        if ref_gflops is not None:
            gap = self.flops / 1e9 - ref_gflops
            lines.append(f"reference FLOPs {ref_gflops:.2f} G, gap {gap:+.2f} G ({100 * gap / ref_gflops:+.1f}%)")
        return "\n".join(lines)


def count_flops(model: Model, input_hw: tuple[int, int] = (64, 64)) -> FlopReport:
    """Analytic FLOPs for one image: 2 per multiply-accumulate in convs and
    projections, plus ``2*L*D*N`` per scan direction for the state update and
    the same again for the output contraction. Elementwise ops are not counted.
    """
    h, w = input_hw
    if h % 8 or w % 8:
        raise DimensionError(f"input extents {h}x{w} must be multiples of 8")
    children = dict(model._children())
    rows = [(name, children[name].num_params(), f) for name, f in model.flop_rows(h, w)]
    return FlopReport(sum(r[1] for r in rows), sum(r[2] for r in rows), (h, w), rows)
