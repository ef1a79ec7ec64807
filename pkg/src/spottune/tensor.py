"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` (entered with ``with
Tape() as tape:``) whenever at least one input requires a gradient.  Outside a
tape every op is a plain numpy evaluation, which is what evaluation code uses.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NumericError(FloatingPointError):
    def __init__(self, op: str, node_id: int):
        self.op = op
        self.node_id = node_id
        super().__init__(f"{op}: non-finite value produced at node {node_id}")


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name
        self.tape: Tape | None = None  # set on recorded (non-leaf) outputs

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.tape is None:
            raise TapeError("tensor was not produced on a tape; nothing to differentiate")
        self.tape.backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return add(scale(self, -1.0), other)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return slice_(self, index)


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the operations of one forward pass."""

    entries: list[TapeEntry] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, kind, inputs, output, backward) -> None:
        if self.consumed:
            raise TapeError("tape already differentiated; record on a fresh tape")
        output.tape = self
        self.entries.append(TapeEntry(kind, tuple(inputs), output.node_id, backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Fill ``.grad`` of every leaf reached from ``loss``.

        Leaf gradients are assigned, not accumulated across calls.  Tensors in
        ``params`` that the loss does not depend on get a zero gradient.
        """
        if self.consumed:
            raise TapeError("backward already called on this tape")
        if loss.shape != ():
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if not self.entries:
            raise TapeError("tape is empty")
        self.consumed = True

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            gout = grads.pop(entry.output_id, None)
            if gout is None:
                continue
            for inp, g in zip(entry.inputs, entry.backward(gout)):
                if g is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    leaves[inp.node_id] = inp
                if inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + g
                else:
                    grads[inp.node_id] = g
        for nid, leaf in leaves.items():
            leaf.grad = np.array(grads[nid], dtype=np.float64).reshape(leaf.shape)
        for p in params:
            if p.node_id not in leaves:
                p.grad = np.zeros_like(p.data)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    """Wrap ``data`` as the output of an op; record it when gradients are needed.

    ``backward(gout)`` returns one gradient (or None) per input.
    """
    out = Tensor(data)
    if not np.all(np.isfinite(out.data)):
        raise NumericError(kind, out.node_id)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, inputs, out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return custom_op("add_scalar", (a,), a.data + c, lambda g: (g,))
    _same_shape("add", a, b)
    return custom_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape("sub", a, b)
    return custom_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return custom_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return custom_op("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return custom_op("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return custom_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return custom_op("log", (a,), out, lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return custom_op("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op("softmax", (a,), y, backward)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return custom_op("log_softmax", (a,), out, backward)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return custom_op("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape),))
    ax = axis % a.data.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape),)

    return custom_op("sum", (a,), a.data.sum(axis=ax), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", a.shape)
    return scale(sum_(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat")
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != ax)
        first = tuple(s for i, s in enumerate(tensors[0].shape) if i != ax)
        if t.data.ndim != nd or other != first:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return custom_op("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=ax), backward)


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("slice", shape) from exc

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return custom_op("slice", (a,), np.array(out), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", src, tuple(shape)) from exc
    return custom_op("reshape", (a,), out, lambda g: (g.reshape(src),))


def square(a: Tensor) -> Tensor:
    return mul(a, a)
