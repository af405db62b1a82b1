"""Reverse-mode autodiff tensor with a dynamically recorded tape.

Every op in :mod:`zoneseg.ops` returns a :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to per-parent gradients.
:func:`backward` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = {"dtype": np.dtype(np.float32), "grad": True}
_node_ids = itertools.count(1)


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float type (``"float32"`` or ``"float64"``)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported precision {dtype}")
    previous = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording, e.g. for validation and inference passes."""
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """An n-d float array plus optional gradient buffer and tape linkage.

    Feature maps are laid out ``(channels, depth, height, width)`` with width
    varying fastest.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "tape_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim and min(arr.shape) < 1:
            raise UsageError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: Optional[int] = next(_node_ids) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> list:
        return backward(self)

    def __add__(self, other):
        from . import ops

        return ops.add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def sum(self):
        from . import ops

        return ops.sum_all(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _wrap(value, dtype) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _not_scalar(shape):
    raise UsageError(f"item() needs a single-element tensor, got shape {shape}")


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it on the tape when any parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    out.tape_id = None
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> list:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add across fan-out. The interior of the graph is released
    afterwards, so a second call on the same loss is an error.

    Returns:
        The leaves that received gradients, in tape order.
    """
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
        node._parents = ()
        node._backward = None
    leaves.sort(key=lambda t: t.tape_id)
    return leaves
