"""Tensor type and the gradient tape that records differentiable ops.

A :class:`Tensor` is a thin wrapper around a numpy array. Ops executed while a
:class:`GradientTape` is active (and that touch at least one tensor with
``requires_grad``) are appended to the tape in execution order, so walking the
tape backwards is already a reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents violate an op's shape contract."""


class StaleTapeError(RuntimeError):
    """Raised when backward is requested on a tape that was already consumed."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or infinity."""


_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Temporarily create tensors in 64-bit precision (used by gradient checks)."""
    previous = get_default_dtype()
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["GradientTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradientTape:
    """Ordered record of the differentiable ops executed inside its context.

    Usage::

        with GradientTape() as tape:
            loss = model(batch)
        tape.backward(loss)

    A tape can be differentiated once; afterwards its records are freed and a
    second ``backward`` raises :class:`StaleTapeError`.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "GradientTape":
        if self.consumed:
            raise StaleTapeError("tape already consumed; open a new tape")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: "Tensor", inputs: Sequence["Tensor"], backward_fn: Callable) -> None:
        output._tape = self
        self.nodes.append(_Node(output, tuple(inputs), backward_fn))

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
        self.nodes = []

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise StaleTapeError("backward already ran on this tape; re-run the forward pass")
        if loss._tape is not self:
            raise StaleTapeError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._tape is not self:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.consumed = True
        self.clear()


def _check_finite(arr: np.ndarray, what: str) -> None:
    if arr.size and not np.isfinite(np.sum(arr, dtype=np.float64)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    """n-dimensional array with optional participation in a gradient tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[GradientTape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        if self._tape is None:
            raise StaleTapeError("tensor has no live tape (already differentiated or built outside a tape)")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, what: str) -> Tensor:
    """Wrap an op output and record it on the active tape when needed."""
    _check_finite(data, what)
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out
