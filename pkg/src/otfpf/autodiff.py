"""Reverse-mode automatic differentiation over dense float32 arrays.

A Tensor wraps a numpy array and, while gradients are enabled, every
operation records its inputs plus a vector-Jacobian closure. Calling
``backward()`` on a scalar result walks the recorded graph in reverse
topological order and accumulates gradients into every reachable leaf
(fan-out sums additively). Re-running a recorded forward pass with the
same inputs reproduces its outputs bit-identically: every operation here
is deterministic.

Graphs are confined to one logical thread; the grad-enabled flag is
thread-local so inference threads can run under ``no_grad`` without
touching each other.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on this thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != DTYPE:
        arr = arr.astype(DTYPE)
    return arr


class Tensor:
    """Dense row-major float32 array plus optional gradient bookkeeping.

    ``data`` is treated as immutable once the tensor participates in a
    recorded computation; parameters are updated by replacing ``data``
    between steps, never mid-graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        ``self`` must be a scalar produced by a recorded computation.
        """
        if self.size != 1:
            raise GraphError(f"backward() requires a scalar output, got shape {self.shape}")
        if self._vjp is None:
            raise GraphError("backward() on a tensor with no recorded computation")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p._vjp is not None or p.requires_grad):
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                if parent._vjp is None and not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                if pg.shape != parent.data.shape:
                    raise GraphError(
                        f"vjp produced gradient of shape {pg.shape} for parent {parent.data.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar (definitions live in ops.py) --------------------
    def __add__(self, other):
        from . import ops
        return ops.add_any(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean_(self, axis=axis, keepdims=keepdims)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def abs(self):
        from . import ops
        return ops.abs_(self)

    def reshape(self, *shape):
        from . import ops
        return ops.reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def swap_last_axes(self):
        from . import ops
        return ops.swap_last_axes(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """Learnable leaf tensor with a path-like name assigned by its model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data: np.ndarray, parents: Iterable, vjp) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording ``vjp`` when gradients flow.

    ``vjp(gout)`` must return one gradient (or None) per parent, each either
    matching the parent's shape or None for non-differentiable inputs.
    """
    parents = tuple(parents)
    assert all(isinstance(p, Tensor) for p in parents)
    out = Tensor(out_data)
    if grad_enabled() and any(p.requires_grad or p._vjp is not None for p in parents):
        out._parents = parents
        out._vjp = vjp
    return out
