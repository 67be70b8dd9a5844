"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a :class:`Node` to the tape implied by
its output tensor. Nodes carry a monotonically increasing id, so collecting the
nodes reachable from a loss and sorting them by id yields the insertion order
of the computation; :func:`backward` walks that order in reverse.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float32

_node_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that suppresses graph recording."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


@dataclass(eq=False)
class Node:
    """One recorded operation: kind, inputs, output and the saved context."""

    id: int
    kind: str
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: dict = field(default_factory=dict)


class Tensor:
    """An n-dimensional float32 array that may participate in a graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar (implemented in ops) -----------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return ops.scale(self, 1.0 / float(other))

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, kind: str, inputs: Sequence[Tensor],
                backward_fn, **saved) -> Tensor:
    """Wrap ``data`` and record a node if any input needs a gradient."""
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(next(_node_ids), kind, tuple(inputs), out, backward_fn, saved)
    return out


class Graph:
    """Operation records reachable from an output, in insertion order."""

    def __init__(self, records: list[Node]):
        self.records = records

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Node] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(node.inputs)
        return cls([seen[k] for k in sorted(seen)])

    def __iter__(self) -> Iterator[Node]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def kinds(self) -> list[str]:
        return [r.kind for r in self.records]


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero them
    between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, grads[id(loss)])
        return
    for node in reversed(graph.records):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise RuntimeError(
                    f"{node.kind}: gradient shape {gi.shape} != input shape {t.shape}")
            if t.node is None:
                _accumulate_leaf(t, gi)
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(DTYPE, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g
