"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-4) -> np.ndarray:
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|n|_inf, |a|_inf)``."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4) -> dict[str, float]:
    """Compare backprop against central differences for each input.

    ``fn`` must rebuild the graph from ``inputs`` on every call and return a
    scalar. Returns one relative error per input (keyed by name or index).
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    errors = {}
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, h)
        errors[t.name or str(i)] = rel_error(analytic, numeric)
    return errors


def random_projection_loss(out: Tensor, seed: int = 0) -> Tensor:
    """``sum(out * R)`` for a fixed random ``R``, exercising every output element."""
    from . import ops

    r = np.asarray(np.random.default_rng(seed).standard_normal(out.shape), dtype=out.dtype)
    return ops.sum(ops.mul(out, Tensor(r)))


def directional_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
                      seed: int = 0) -> dict[str, float]:
    """Per-input check along one random unit direction ``v``.

    Compares ``<grad, v>`` with ``(f(p + h v) - f(p - h v)) / 2h``; two
    evaluations per input instead of two per element, for large models.
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    errors = {}
    for i, t in enumerate(inputs):
        v = rng.standard_normal(t.shape)
        v /= np.linalg.norm(v)
        analytic = float(np.sum((t.grad if t.grad is not None else 0.0) * v))
        orig = t.data.copy()
        with no_grad():
            t.data = orig + h * v
            fp = fn().item()
            t.data = orig - h * v
            fm = fn().item()
        t.data = orig
        numeric = (fp - fm) / (2 * h)
        errors[t.name or str(i)] = rel_error(np.array([analytic]), np.array([numeric]))
    return errors


def joint_directional_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
                            seed: int = 0) -> float:
    """Check the full gradient along one random unit direction over all inputs jointly."""
    for t in inputs:
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    dirs = [rng.standard_normal(t.shape) for t in inputs]
    norm = np.sqrt(sum(float(np.sum(v * v)) for v in dirs))
    dirs = [v / norm for v in dirs]
    analytic = sum(float(np.sum((t.grad if t.grad is not None else 0.0) * v)) for t, v in zip(inputs, dirs))
    origs = [t.data.copy() for t in inputs]
    values = []
    with no_grad():
        for sign in (1.0, -1.0):
            for t, o, v in zip(inputs, origs, dirs):
                t.data = o + sign * h * v
            values.append(fn().item())
    for t, o in zip(inputs, origs):
        t.data = o
    numeric = (values[0] - values[1]) / (2 * h)
    return rel_error(np.array([analytic]), np.array([numeric]))
