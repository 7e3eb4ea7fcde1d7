"""Dense tensor with a recorded computation graph and reverse-mode gradients.

A :class:`Tensor` wraps a numpy array of rank 1 to 4.  Operations in
:mod:`fbpfusion.ops` build new tensors and, when any input requires a
gradient, attach a backward closure plus references to their inputs.  The
graph is therefore a DAG rooted at the loss; :func:`backward` walks it in
reverse topological order and accumulates gradients into the leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from fbpfusion.errors import ContractError, DimensionError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= 4:
            raise DimensionError(f"tensor rank must be 1..4, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._freed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        if data.ndim == 0:
            data = data.reshape(1)
        if not 1 <= data.ndim <= 4:
            raise DimensionError(f"{op} produced rank-{data.ndim} result {data.shape}")
        out.data = data
        out.grad = None
        out.name = ""
        out._freed = False
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
            out._op = op
        else:
            out._parents = ()
            out._backward = None
            out._op = "const"
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad}{tag})"

    # operator sugar, implemented in ops
    def __add__(self, other):
        from fbpfusion import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from fbpfusion import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from fbpfusion import ops
        return ops.matmul(self, other)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
    order: list = []
    seen: set = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    The graph is released afterwards; a second call on the same loss raises
    :class:`ContractError`.  Leaf gradients accumulate across calls on
    different losses until :meth:`Tensor.zero_grad` resets them.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise ContractError("backward called twice on the same graph; rebuild the forward pass first")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._freed:
            raise ContractError("graph already released by an earlier backward call")
        if g is not None:
            in_grads = node._backward(g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._backward = None
        node._freed = True
    loss._freed = True
