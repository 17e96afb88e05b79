"""Dense tensors with reverse-mode differentiation.

A Tensor wraps a numpy float array (float32 by default, float64 for gradient
checking) and records the operation that produced it so that cotangents can be
pulled back through the graph.  Arrays are frozen after construction; every
operation returns a fresh Tensor.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32


class GridError(ValueError):
    """Shape or domain violation in a grid operation."""


class NumericError(ArithmeticError):
    """Non-finite values where the operation contract requires finite ones."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward values are still computed."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Immutable dense float grid, row-major, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)) and data.dtype in FLOAT_DTYPES:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if arr.dtype not in FLOAT_DTYPES:
            raise GridError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.flags["OWNDATA"]:
            arr.setflags(write=False)
        else:
            arr = arr.copy()
            arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def result(data: np.ndarray, parents: Iterable["Tensor"], vjp) -> "Tensor":
        """Wrap an op result, recording parents only when gradients are live."""
        parents = tuple(parents)
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=track)
        if track:
            out._parents = parents
            out._vjp = vjp
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # -- autodiff ---------------------------------------------------------------

    def backward(self, cotangent: np.ndarray | None = None) -> None:
        """Accumulate gradients of a scalar projection of this tensor into leaves.

        `cotangent` defaults to ones (the plain sum projection).  Gradients of
        leaf tensors with requires_grad are left in `.grad`; intermediate
        gradients are freed as soon as their consumers are processed.
        """
        if cotangent is None:
            cotangent = np.ones(self.shape, dtype=self.data.dtype)
        cotangent = np.asarray(cotangent, dtype=self.data.dtype)
        if cotangent.shape != self.shape:
            raise GridError(f"cotangent shape {cotangent.shape} != tensor shape {self.shape}")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): cotangent}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and node.requires_grad and node._vjp is None:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise GridError(
                        f"adjoint produced shape {pg.shape} for input of shape {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar (implemented in ops.py, bound late) ----------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_const(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add_const(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_const(self, -other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other) if isinstance(other, Tensor) else ops.mul_const(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul_const(self, other)

    def __neg__(self):
        from . import ops

        return ops.mul_const(self, -1.0)

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.mul_const(self, 1.0 / other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes):
        from . import ops

        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iterative to tolerate deep graphs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def require_finite(t: Tensor, context: str) -> Tensor:
    if not t.is_finite():
        raise NumericError(f"non-finite values in {context}")
    return t
