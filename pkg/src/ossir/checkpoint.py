"""Little-endian checkpoint container.

Layout::

    b"VMIR"  u32 version
    u32 n    n bytes of UTF-8 config text (key=value lines)
    u32 count
    count x { u32 len, name bytes, u8 dtype tag, u32 rank, rank x u64 extent, raw data }
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import Model, ModelConfig, build

MAGIC = b"VMIR"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(config_text: str, tensors: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    cfg = config_text.encode("utf-8")
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        tag = _TAG_OF[arr.dtype]
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BI", tag, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("not a VMIR checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    (n,) = r.unpack("<I", "config length")
    config_text = r.take(n, "config").decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<I", "name length")
        name = r.take(ln, "name").decode("utf-8")
        at = r.pos
        tag, rank = r.unpack("<BI", "dtype/rank")
        if tag not in _TAGS:
            raise ParseError(f"unknown dtype tag {tag} for {name!r}", at)
        shape = r.unpack(f"<{rank}Q", "extents")
        dt = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(r.take(nbytes, f"data of {name!r}"), dtype=dt).reshape(shape)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise ParseError("trailing bytes after tensor table", r.pos)
    return config_text, tensors


def save(path: str | Path, model: Model) -> None:
    tensors = {name: p.data for name, p in model.named_parameters()}
    Path(path).write_bytes(dumps(model.config.to_text(), tensors))


def load(path: str | Path) -> Model:
    config_text, tensors = loads(Path(path).read_bytes())
    model = build(ModelConfig.from_text(config_text))
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise ParseError(f"checkpoint tensors do not match the model: {missing[:5]}", 0)
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise ParseError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.data.shape}", 0)
        p.data = tensors[name].astype(p.data.dtype, copy=False)
    return model
