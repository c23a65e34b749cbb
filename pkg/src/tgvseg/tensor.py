"""Rank-4 tensor values with reverse-mode gradients.

A ``Tensor`` wraps a dense float64 array of shape (batch, channel, height,
width) plus an optional gradient buffer of the same shape. Operations build a
graph by recording parent tensors and a backward closure; ``backward()`` on a
single-element tensor walks the graph in reverse topological order and
accumulates gradients into every participating node.

``Param`` bundles a learnable leaf tensor with its optimizer state (first and
second moments, step counter).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ShapeError, TrainingError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError("Tensor", "rank", 4, arr.ndim)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None

    # --- construction helpers ---
    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)

    @staticmethod
    def scalar(value: float, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float64), requires_grad)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "size", 1, self.data.size)
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # --- autograd core ---
    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every node reachable from self.

        Only defined for single-element tensors (scalar losses).
        """
        if self.data.size != 1:
            raise ShapeError("backward", "size", 1, self.data.size)
        if not np.isfinite(self.data[0, 0, 0, 0]):
            raise TrainingError("backward called on a non-finite loss value")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # --- elementwise arithmetic (broadcasting per numpy rules) ---
    def __add__(self, other):
        other = _as_tensor(other)
        out = _from_op(self.data + other.data, (self, other))
        if out.requires_grad:

            def _bw():
                g = out.grad
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(g, other.shape))

            out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _from_op(-self.data, (self,))
        if out.requires_grad:

            def _bw():
                self.accumulate_grad(-out.grad)

            out._backward = _bw
        return out

    def __sub__(self, other):
        other = _as_tensor(other)
        out = _from_op(self.data - other.data, (self, other))
        if out.requires_grad:

            def _bw():
                g = out.grad
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(-g, other.shape))

            out._backward = _bw
        return out

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _from_op(self.data * other.data, (self, other))
        if out.requires_grad:

            def _bw():
                g = out.grad
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(g * self.data, other.shape))

            out._backward = _bw
        return out

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        """Full reduction to a (1,1,1,1) tensor."""
        out = _from_op(self.data.sum().reshape(1, 1, 1, 1), (self,))
        if out.requires_grad:

            def _bw():
                self.accumulate_grad(np.full_like(self.data, out.grad[0, 0, 0, 0]))

            out._backward = _bw
        return out


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor.scalar(float(value))


def _from_op(data: np.ndarray, parents: Tuple[Tensor, ...]) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
    return out


def _unbroadcast(g: np.ndarray, target_shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the parent's shape."""
    if g.shape == tuple(target_shape):
        return g
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, target_shape)) if ts == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


class Param:
    """A learnable tensor with gradient and per-parameter optimizer state."""

    __slots__ = ("value", "m", "v", "step_count")

    def __init__(self, value):
        if isinstance(value, Tensor):
            self.value = value
        else:
            # own the buffer: optimizer steps mutate it in place
            self.value = Tensor(np.array(value, dtype=np.float64, copy=True))
        self.value.requires_grad = True
        self.m = np.zeros_like(self.value.data)
        self.v = np.zeros_like(self.value.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        """Reset the gradient buffer to zeros (allocating it if absent)."""
        self.value.grad = np.zeros_like(self.value.data)

    def __repr__(self) -> str:
        return f"Param(shape={self.value.data.shape}, steps={self.step_count})"
