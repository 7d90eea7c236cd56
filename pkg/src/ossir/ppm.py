"""Binary PPM (P6) reading and writing.

A decoded file keeps its original header bytes, so writing it back
reproduces the input byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError

_WS = b" \t\n\r\v\f"


@dataclass
class PpmImage:
    pixels: np.ndarray  # uint8 [H, W, 3]
    maxval: int = 255
    header: bytes | None = None

    def to_float(self) -> np.ndarray:
        """``[3, H, W]`` float64 in ``[0, 1]``."""
        return np.transpose(self.pixels, (2, 0, 1)).astype(np.float64) / self.maxval

    @classmethod
    def from_float(cls, img: np.ndarray) -> "PpmImage":
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DimensionError(f"expected [3,H,W], got {img.shape}")
        px = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
        return cls(np.ascontiguousarray(np.transpose(px, (1, 2, 0))))

    def encode(self) -> bytes:
        h, w, _ = self.pixels.shape
        header = self.header or f"P6\n{w} {h}\n{self.maxval}\n".encode()
        return header + self.pixels.tobytes()


def _token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c not in _WS and c != b"#":
            break
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            pos += 1
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WS and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return buf[start:pos], pos


def decode(buf: bytes) -> PpmImage:
    magic, pos = _token(buf, 0)
    if magic != b"P6":
        raise ParseError(f"bad magic {magic[:8]!r}, expected P6", 0)
    fields = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok, pos = _token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"{what} is not a decimal integer: {tok[:16]!r}", start)
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise ParseError(f"image extents must be positive, got {w}x{h}", pos)
    if not 1 <= maxval <= 255:
        raise ParseError(f"only 8-bit maxval is supported, got {maxval}", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WS:
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    need = w * h * 3
    have = len(buf) - pos
    if have < need:
        raise ParseError(f"truncated payload: need {need} bytes, found {have}", len(buf))
    if have > need:
        raise ParseError(f"{have - need} trailing bytes after payload", pos + need)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()
    if px.max(initial=0) > maxval:
        raise ParseError(f"sample exceeds maxval {maxval}", pos + int(np.argmax(px.reshape(-1) > maxval)))
    return PpmImage(px, maxval, bytes(buf[:pos]))


def read_ppm(path: str | Path) -> PpmImage:
    return decode(Path(path).read_bytes())


def write_ppm(path: str | Path, image: PpmImage | np.ndarray) -> None:
    if not isinstance(image, PpmImage):
        image = PpmImage.from_float(image)
    Path(path).write_bytes(image.encode())
