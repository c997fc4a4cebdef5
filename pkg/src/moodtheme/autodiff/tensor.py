"""Tensor, tape and the reverse-mode driver.

Ops are registered in a table (see ``ops.py``) as a pair of numpy functions:
``forward(arrays, **attrs) -> (out, saved)`` and
``backward(grad_out, saved, arrays, **attrs) -> list of input grads``.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., list]


OPS: dict[str, OpDef] = {}


def register(name: str):
    """Decorator pairing a forward function with its backward rule.

    Usage::

        @register("relu")
        class _:
            def forward(x): ...
            def backward(g, saved, x): ...
    """

    def deco(cls):
        OPS[name] = OpDef(name, cls.forward, cls.backward)
        return cls

    return deco


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


_counter = iter(range(1 << 62))


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output_id: int
    saved: Any
    attrs: dict


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name
        self.id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # sugar for the handful of ops used inline
    def __add__(self, other):
        return apply("add", [self, _as_tensor(other, self.dtype)])

    __radd__ = __add__

    def __mul__(self, factor: float):
        return apply("scale", [self], factor=float(factor))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return apply("matmul", [self, other])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=tuple(shape))

    def transpose(self, *axes):
        return apply("transpose", [self], axes=tuple(axes))

    def mean(self, axis=None, keepdims=False):
        return apply("mean", [self], axis=axis, keepdims=keepdims)

    def __getitem__(self, index):
        return apply("slice", [self], index=index)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def apply(op_kind: str, inputs: list[Tensor], **attrs) -> Tensor:
    """Run a registered op and, if any input tracks gradients, record a tape node."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind {op_kind!r}") from None
    arrays = [t.data for t in inputs]
    out, saved = op.forward(*arrays, **attrs)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op_kind}: non-finite value in forward output")
    result = Tensor(out)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op_kind, tuple(inputs), result.id, saved, attrs)
    return result


@dataclass
class Tape:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append(t.node)
                continue
            if t.id in seen:
                continue
            seen.add(t.id)
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and inp.id not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Leaf gradients are added to whatever is already stored; callers reset them
    between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_output(loss)
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    if loss.node is None:
        _accumulate(loss, grads[loss.id])
        return
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        op = OPS[node.op]
        arrays = [t.data for t in node.inputs]
        in_grads = op.backward(g, node.saved, *arrays, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate(t, gi)
            elif t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi


def _accumulate(leaf: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g
