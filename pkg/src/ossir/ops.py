"""Differentiable tensor operations used by the model.

Layout is NCHW throughout. Broadcasting is deliberately limited to
python scalars and ``[B,C,1,1] * [B,C,H,W]``; anything else raises
:class:`DimensionError`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, as_tensor, record, record1


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_channel_broadcast(small: tuple, big: tuple) -> bool:
    return len(small) == 4 and len(big) == 4 and small[:2] == big[:2] and small[2:] == (1, 1)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return record1("add_scalar", a.data + b, [a], lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")
    return record1("add", a.data + b.data, [a, b], lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same(a, b, "sub")
    return record1("sub", a.data - b.data, [a, b], lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return record1("neg", -a.data, [a], lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record1("scale", a.data * s, [a], lambda g: (g * s,))


def mul(a, b) -> Tensor:
    """Elementwise product; also ``[B,C,1,1] * [B,C,H,W]`` in either order."""
    if not isinstance(b, Tensor):
        return scale(as_tensor(a), b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return record1("mul", ad * bd, [a, b], lambda g: (g * bd, g * ad))
    if _is_channel_broadcast(a.shape, b.shape):
        return mul(b, a)
    if _is_channel_broadcast(b.shape, a.shape):
        ad, bd = a.data, b.data

        def grad(g):
            return g * bd, (g * ad).sum(axis=(2, 3), keepdims=True)

        return record1("mul_bcast", ad * bd, [a, b], grad)
    raise DimensionError(f"mul: unsupported broadcast {a.shape} * {b.shape}")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record1("exp", out, [a], lambda g: (g * out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sgn = np.sign(a.data)
    return record1("abs", np.abs(a.data), [a], lambda g: (g * sgn,))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape, dt = a.shape, a.dtype
    return record1("sum", np.asarray(a.data.sum(), dtype=dt), [a],
                   lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.size
    return record1("mean", np.asarray(a.data.mean(), dtype=dt), [a],
                   lambda g: (np.full(shape, g / n, dtype=dt),))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error."""
    _check_same(pred, target, "l1_loss")
    diff = pred.data - target.data
    n = diff.size
    sgn = np.sign(diff)
    return record1("l1_loss", np.asarray(np.abs(diff).mean(), dtype=pred.dtype), [pred, target],
                   lambda g: (sgn * (g / n), -sgn * (g / n)))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return record1("sigmoid", s, [a], lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return record1("silu", x * s, [a], lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def _softplus(x: np.ndarray) -> np.ndarray:
    big = x > 20.0
    return np.where(big, x, np.log1p(np.exp(np.where(big, 0.0, x))))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return record1("softplus", _softplus(x).astype(x.dtype), [a], lambda g: (g * _sigmoid(x),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return record1("reshape", out, [a], lambda g: (g.reshape(old),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record1("permute", out, [a], lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def flip(a: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(a.data, axis))
    return record1("flip", out, [a], lambda g: (np.ascontiguousarray(np.flip(g, axis)),))


def take(a: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """Reorder ``axis`` by a permutation (gather with a bijective index)."""
    perm = np.asarray(perm)
    if perm.shape != (a.shape[axis],):
        raise DimensionError(f"take: permutation length {perm.shape} != extent {a.shape[axis]}")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    out = np.take(a.data, perm, axis=axis)
    return record1("take", out, [a], lambda g: (np.take(g, inv, axis=axis),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat of zero tensors")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat: axis {axis} out of range for rank {nd}")
    axis %= nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise DimensionError(f"concat: extent mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record1("concat", out, list(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def split(a: Tensor, axis: int, parts: int) -> list[Tensor]:
    """Split ``axis`` into ``parts`` equal pieces."""
    nd = a.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"split: axis {axis} out of range for rank {nd}")
    axis %= nd
    if a.shape[axis] % parts:
        raise DimensionError(f"split: extent {a.shape[axis]} not divisible into {parts} parts")
    pieces = [np.ascontiguousarray(p) for p in np.split(a.data, parts, axis=axis)]
    dt = a.dtype

    def grad(gs):
        full = [g if g is not None else np.zeros_like(p) for g, p in zip(gs, pieces)]
        return (np.concatenate(full, axis=axis).astype(dt, copy=False),)

    return record("split", pieces, [a], grad)


def pixel_shuffle(a: Tensor, r: int) -> Tensor:
    """``[B, C*r*r, H, W] -> [B, C, r*H, r*W]``."""
    b, c, h, w = a.shape
    if c % (r * r):
        raise DimensionError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    co = c // (r * r)
    out = a.data.reshape(b, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, co, h * r, w * r)

    def grad(g):
        return (g.reshape(b, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c, h, w),)

    return record1("pixel_shuffle", np.ascontiguousarray(out), [a], grad)


def pixel_unshuffle(a: Tensor, r: int) -> Tensor:
    """``[B, C, r*H, r*W] -> [B, C*r*r, H, W]``; exact inverse of :func:`pixel_shuffle`."""
    b, c, H, W = a.shape
    if H % r or W % r:
        raise DimensionError(f"pixel_unshuffle: spatial extents {(H, W)} not divisible by {r}")
    h, w = H // r, W // r
    out = a.data.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h, w)

    def grad(g):
        return (g.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, H, W),)

    return record1("pixel_unshuffle", np.ascontiguousarray(out), [a], grad)


def global_avg_pool(a: Tensor) -> Tensor:
    b, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3), keepdims=True)
    n = h * w
    return record1("global_avg_pool", out, [a],
                   lambda g: (np.broadcast_to(g / n, (b, c, h, w)).astype(a.dtype),))


# ---------------------------------------------------------------------------
# linear algebra / convolution
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., in] @ w[out, in].T + b[out]``."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def grad(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = (g @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = [x, w] if b is None else [x, w, b]
    return record1("linear", out, inputs, grad)


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int | None = None) -> Tensor:
    """Cross-correlation. ``pad=None`` means same-size padding ``(k-1)//2``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    B, Cin, H, W = x.shape
    Cout, wc, k, k2 = w.shape
    if wc != Cin:
        raise DimensionError(f"conv2d: input has {Cin} channels, weight expects {wc}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d: stride must be 1 or 2, got {stride}")
    p = (k - 1) // 2 if pad is None else pad
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: output would be empty for input {H}x{W}")
    xd, wd = x.data, w.data

    if k == 1 and stride == 1 and p == 0:
        w2 = wd[:, :, 0, 0]
        xf = xd.reshape(B, Cin, H * W)
        out = np.matmul(w2, xf).reshape(B, Cout, H, W)
        if b is not None:
            out += b.data[None, :, None, None]

        def grad1(g):
            gf = g.reshape(B, Cout, H * W)
            gx = np.matmul(w2.T, gf).reshape(xd.shape)
            gw = np.einsum("bop,bcp->oc", gf, xf)[:, :, None, None]
            if b is None:
                return gx, gw
            return gx, gw, gf.sum(axis=(0, 2))

        return record1("conv2d", out, [x, w] if b is None else [x, w, b], grad1)

    xp = _pad_hw(xd, p)
    s = stride
    out = np.zeros((B, Cout, Ho, Wo), dtype=np.result_type(xd, wd))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
            out += np.einsum("oc,bchw->bohw", wd[:, :, i, j], patch, optimize=True)
    if b is not None:
        out += b.data[None, :, None, None]

    def grad(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None),
                      slice(i, i + s * (Ho - 1) + 1, s), slice(j, j + s * (Wo - 1) + 1, s))
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[sl], optimize=True)
                gxp[sl] += np.einsum("oc,bohw->bchw", wd[:, :, i, j], g, optimize=True)
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        gx = np.ascontiguousarray(gx)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record1("conv2d", out, [x, w] if b is None else [x, w, b], grad)


def dwconv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depth-wise same-size convolution; ``w`` has shape ``[C, 1, k, k]``."""
    B, C, H, W = x.shape
    if w.ndim != 4 or w.shape[0] != C or w.shape[1] != 1:
        raise DimensionError(f"dwconv2d: weight {w.shape} incompatible with {C} channels")
    k = w.shape[2]
    if k % 2 == 0 or w.shape[3] != k:
        raise DimensionError(f"dwconv2d: kernel must be square and odd, got {w.shape[2:]}")
    p = (k - 1) // 2
    xd, wd = x.data, w.data
    xp = _pad_hw(xd, p)
    out = np.zeros_like(xd)
    for i in range(k):
        for j in range(k):
            out += wd[None, :, 0, i, j, None, None] * xp[:, :, i:i + H, j:j + W]
    if b is not None:
        out += b.data[None, :, None, None]

    def grad(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i:i + H, j:j + W])
                gxp[:, :, i:i + H, j:j + W] += wd[None, :, 0, i, j, None, None] * g
        gx = np.ascontiguousarray(gxp[:, :, p:p + H, p:p + W]) if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record1("dwconv2d", out, [x, w] if b is None else [x, w, b], grad)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

LAYERNORM_EPS = 1e-6


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the channel axis independently at each ``(b, h, w)``."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layernorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def grad(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record1("layernorm", out, [x, gamma, beta], grad)
