"""Dense tensor with reverse-mode differentiation.

Every differentiable operation appends a :class:`Node` to the graph. Nodes
carry a global sequence number, so the append order is a valid topological
order and :func:`backward` simply walks the reachable nodes from the highest
sequence number down.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, GraphError

_DTYPES = (np.float32, np.float64)
_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded operation.

    ``backward`` maps the list of output gradients (``None`` for outputs that
    received no gradient) to a tuple with one entry per input.
    """

    __slots__ = ("op", "inputs", "n_out", "backward", "seq", "consumed")

    def __init__(self, op: str, inputs: Sequence["Tensor"], n_out: int, backward: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.n_out = n_out
        self.backward = backward
        self.seq = next(_seq)
        self.consumed = False

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """N-D float array (f32 or f64) with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "_index", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.array(data, copy=True)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.require(arr, requirements="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self._index = 0
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._node = None
        t._index = 0
        t.name = None
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators (delegated to ops) -----------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(op: str, outputs: Sequence[np.ndarray], inputs: Sequence[Tensor], grad_fn: Callable) -> list[Tensor]:
    """Wrap raw outputs as tensors and append a graph node when needed."""
    outs = [Tensor._wrap(o) for o in outputs]
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        node = Node(op, inputs, len(outs), grad_fn)
        for i, t in enumerate(outs):
            t.requires_grad = True
            t._node = node
            t._index = i
    return outs


def record1(op: str, output: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Single-output form of :func:`record`; ``grad_fn`` takes one gradient array."""
    return record(op, [output], inputs, lambda gs: grad_fn(gs[0]))[0]


def _reachable(root: Node) -> list[Node]:
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for t in node.inputs:
            n = t._node
            if n is not None and id(n) not in seen:
                seen[id(n)] = n
                stack.append(n)
    return sorted(seen.values(), key=lambda n: n.seq, reverse=True)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate. The graph is consumed: a second call on the
    same graph raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (detached graph or no trainable inputs)")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    nodes = _reachable(loss._node)
    if any(n.consumed for n in nodes):
        raise GraphError("backward called twice on the same graph; rebuild it with a new forward pass")

    pending: dict[int, list] = {id(loss._node): [None] * loss._node.n_out}
    pending[id(loss._node)][loss._index] = np.ones_like(loss.data)
    for node in nodes:
        gouts = pending.pop(id(node), None)
        node.consumed = True
        if gouts is None or all(g is None for g in gouts):
            node.backward = None
            continue
        gins = node.backward(gouts)
        node.backward = None
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise DimensionError(f"{node.op}: gradient shape {g.shape} != input shape {t.data.shape}")
            if t._node is None:
                t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g
            else:
                slot = pending.setdefault(id(t._node), [None] * t._node.n_out)
                prev = slot[t._index]
                slot[t._index] = g if prev is None else prev + g
