"""Reverse-mode differentiation over numpy arrays.

Every op builds its output ``Tensor`` together with a closure that pushes
the output gradient back to its inputs. ``Tensor.backward`` walks the
graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


# finiteness of every op output is asserted unless switched off for speed
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        if CHECK_FINITE and op and not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite output from op {op!r}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        # never updated in place, so incoming arrays can be kept without a copy
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            g = np.broadcast_to(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                node.grad = None

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import add, neg
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        from .ops import add, neg
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import neg
        return neg(self)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward, op) -> Tensor:
    """Build an op output; the closure is dropped when no input needs grads."""
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, parents if rg else (), backward if rg else None, op)
