"""Parameter containers and initializers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(data: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Module:
    """Base class: parameters are discovered from instance attributes.

    Attributes holding a requires-grad :class:`Tensor`, a :class:`Module`, or a
    list of modules are walked in assignment order, which keeps parameter
    naming (and checkpoint layout) stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip(".") or type(self).__name__, self
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        hook = _watch.get("hook")
        if hook is not None:
            hook(self, out)
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError


# Debug hook slot used by the trainer to locate the first non-finite module output.
_watch: dict = {}


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (cout, cin, k, k)), dtype)
        self.bias = parameter(np.zeros(cout), dtype) if bias else None
        self.cin, self.cout, self.k = cin, cout, k

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)

    def flops(self, h: int, w: int) -> int:
        return 2 * self.cout * self.cin * self.k * self.k * h * w


class DWConv2d(Module):
    def __init__(self, channels: int, k: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = parameter(trunc_normal(rng, (channels, 1, k, k)), dtype)
        self.bias = parameter(np.zeros(channels), dtype)
        self.channels, self.k = channels, k

    def forward(self, x: Tensor) -> Tensor:
        return ops.dwconv2d(x, self.weight, self.bias)

    def flops(self, h: int, w: int) -> int:
        return 2 * self.channels * self.k * self.k * h * w


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.weight = parameter(np.ones(channels), dtype)
        self.bias = parameter(np.zeros(channels), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.weight, self.bias)
