"""Compiled recurrence kernels for the fused selective scan.

The transcendental parts (``exp``/``expm1``) are evaluated by numpy, which
vectorizes them; these loops only do the multiply-add recurrence and the
reductions, touching each ``[B, L, D, N]`` buffer once per pass.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

AVAILABLE = numba is not None


def _fwd(x, abar, q, bm, c, dskip, hs, y):
    B, L, D = x.shape
    N = bm.shape[2]
    for b in range(B):
        h = np.zeros((D, N), dtype=hs.dtype)
        for t in range(L):
            for d in range(D):
                xv = x[b, t, d]
                acc = 0.0
                for n in range(N):
                    hv = abar[b, t, d, n] * h[d, n] + q[b, t, d, n] * bm[b, t, n] * xv
                    h[d, n] = hv
                    hs[b, t, d, n] = hv
                    acc += c[b, t, n] * hv
                y[b, t, d] = acc + dskip[d] * xv


def _fwd_nohist(x, abar, q, bm, c, dskip, state, y):
    B, L, D = x.shape
    N = bm.shape[2]
    for b in range(B):
        h = state[b]
        for t in range(L):
            for d in range(D):
                xv = x[b, t, d]
                acc = 0.0
                for n in range(N):
                    hv = abar[b, t, d, n] * h[d, n] + q[b, t, d, n] * bm[b, t, n] * xv
                    h[d, n] = hv
                    acc += c[b, t, n] * hv
                y[b, t, d] = acc + dskip[d] * xv


def _bwd(gy, x, abar, q, bm, c, a, delta, dskip, hs, gx, gdelta, gbm, gc, ga, gd):
    B, L, D = x.shape
    N = bm.shape[2]
    inv_a = 1.0 / a
    zero = np.zeros((D, N), dtype=hs.dtype)
    ga_loc = np.zeros((D, N), dtype=hs.dtype)
    gc_loc = np.zeros(N, dtype=hs.dtype)
    gb_loc = np.zeros(N, dtype=hs.dtype)
    for b in range(B):
        lam = np.zeros((D, N), dtype=hs.dtype)
        for t in range(L - 1, -1, -1):
            hprev = hs[b, t - 1] if t > 0 else zero
            h = hs[b, t]
            ab_t = abar[b, t]
            q_t = q[b, t]
            cv = c[b, t]
            bv = bm[b, t]
            gc_loc[:] = 0.0
            gb_loc[:] = 0.0
            for d in range(D):
                g = gy[b, t, d]
                xv = x[b, t, d]
                dt = delta[b, t, d]
                gd[d] += g * xv
                gxv = zero[0, 0]
                gdt = zero[0, 0]
                for n in range(N):
                    gc_loc[n] += g * h[d, n]
                    lv = lam[d, n] + g * cv[n]
                    ab = ab_t[d, n]
                    qv = q_t[d, n]
                    lb = lv * bv[n]
                    # gq = lv * b * x is the gradient w.r.t. the drive coefficient q
                    gq = lb * xv
                    gxv += lb * qv
                    gb_loc[n] += lv * qv * xv
                    gab = lv * hprev[d, n]
                    gdt += ab * (gab * a[d, n] + gq)
                    ga_loc[d, n] += gab * ab * dt + gq * (dt * ab - qv) * inv_a[d, n]
                    lam[d, n] = lv * ab
                gx[b, t, d] = gxv + g * dskip[d]
                gdelta[b, t, d] = gdt
            gc[b, t] = gc_loc
            gbm[b, t] = gb_loc
            if t % 64 == 0:
                ga += ga_loc
                ga_loc[:] = 0.0
    ga += ga_loc


if AVAILABLE:
    _fwd_jit = numba.njit(cache=True, nogil=True, fastmath=True)(_fwd)
    _fwd_nohist_jit = numba.njit(cache=True, nogil=True, fastmath=True)(_fwd_nohist)
    _bwd_jit = numba.njit(cache=True, nogil=True, fastmath=True)(_bwd)
else:  # pragma: no cover
    _fwd_jit = _fwd_nohist_jit = _bwd_jit = None


def scan_forward(x, abar, q, bm, c, dskip):
    y = np.empty(x.shape, dtype=x.dtype)
    hs = np.empty(abar.shape, dtype=abar.dtype)
    _fwd_jit(x, abar, q, bm, c, dskip, hs, y)
    return y, hs


def scan_forward_step(x, abar, q, bm, c, dskip, state):
    """Advance ``state`` ``[B, D, N]`` in place over a block of tokens, keeping no history."""
    y = np.empty(x.shape, dtype=x.dtype)
    _fwd_nohist_jit(x, abar, q, bm, c, dskip, state, y)
    return y


def scan_backward(gy, x, abar, q, bm, c, a, delta, dskip, hs):
    acc = np.float64
    gx = np.empty(x.shape, dtype=x.dtype)
    gdelta = np.empty(delta.shape, dtype=delta.dtype)
    gbm = np.empty(bm.shape, dtype=x.dtype)
    gc = np.empty(c.shape, dtype=x.dtype)
    ga = np.zeros(a.shape, dtype=acc)
    gd = np.zeros(dskip.shape, dtype=acc)
    _bwd_jit(np.ascontiguousarray(gy), x, abar, q, bm, c, a, delta, dskip, hs, gx, gdelta, gbm, gc, ga, gd)
    dt = x.dtype
    return gx, gdelta, gbm.astype(dt), gc.astype(dt), ga.astype(dt), gd.astype(dt)
