"""Tensor, tape node and recording machinery for reverse-mode differentiation.

Every primitive records a :class:`Node` holding its inputs and a vector-Jacobian
rule.  The rules are written with Tensor operations themselves, so running a
backward pass while recording is enabled produces a graph that can be
differentiated again.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractViolation(RuntimeError):
    """An operation was called outside its documented preconditions."""


def _recording() -> bool:
    return getattr(_state, "recording", True)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _debug() -> bool:
    return getattr(_state, "debug", False)


@contextmanager
def no_grad():
    """Disable recording; operations return plain constant tensors."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextmanager
def enable_grad(flag: bool = True):
    prev = _recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


@contextmanager
def debug_checks(flag: bool = True):
    """Check every recorded output for NaN/Inf while active."""
    prev = _debug()
    _state.debug = flag
    try:
        yield
    finally:
        _state.debug = prev


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "vjp", "ctx", "seq", "shape", "__weakref__")

    def __init__(self, op: str, inputs: tuple, vjp: Callable, ctx: dict, shape: tuple):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.ctx = ctx
        self.seq = next(_seq)
        self.shape = shape

    def __repr__(self) -> str:
        ins = ", ".join(str(tuple(t.shape)) for t in self.inputs)
        return f"#{self.seq} {self.op}({ins}) -> {self.shape}"


class Tape:
    """Append-only listing of the nodes recorded while the tape is active.

    Gradients are computed from the graph links on each tensor, so a tape is
    only needed for inspection (size, text dump).  Leaving the ``with`` block
    drops the listing so the graph can be garbage collected.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def dump(self) -> str:
        return "\n".join(repr(n) for n in self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


class Tensor:
    """Dense float array participating in differentiation."""

    __slots__ = ("data", "requires_grad", "tape_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        elif dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape_node: Optional[Node] = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return self.tape_node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self, requires_grad: Optional[bool] = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=8)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators (implemented in ops) -----------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, key):
        return _ops().index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return _ops().swapaxes(self, a, b)

    @property
    def T(self):
        return _ops().swapaxes(self, -1, -2)


def _ops():
    from . import ops

    return ops


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, **ctx) -> Tensor:
    """Wrap a forward value and attach a tape node when any input needs grad.

    ``vjp(g, node)`` returns one gradient (Tensor or None) per input.
    """
    result = Tensor(out, dtype=out.dtype if isinstance(out, np.ndarray) else None)
    if _debug() and not np.all(np.isfinite(result.data)):
        raise FloatingPointError(f"non-finite output from {op}")
    if _recording() and any(t.requires_grad for t in inputs):
        node = Node(op, tuple(inputs), vjp, ctx, result.shape)
        result.requires_grad = True
        result.tape_node = node
        stack = _tape_stack()
        if stack:
            stack[-1].nodes.append(node)
    return result
