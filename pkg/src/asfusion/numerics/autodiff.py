"""Tape-based reverse-mode differentiation over numpy arrays."""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_PRECISION = {32: np.float32, 64: np.float64}
_dtype = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ContractError(ValueError):
    pass


def set_precision(bits: int) -> None:
    """Select the global scalar width (32 for training, 64 for gradient checks)."""
    global _dtype
    if bits not in _PRECISION:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _PRECISION[bits]


def get_dtype():
    return _dtype


class precision:
    """Context manager that temporarily switches the global precision."""

    def __init__(self, bits: int):
        self.bits = bits

    def __enter__(self):
        self._prev = _dtype
        set_precision(self.bits)
        return self

    def __exit__(self, *exc):
        global _dtype
        _dtype = self._prev


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(_dtype)
    return Tensor(arr)


@dataclass
class Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "active_tape", default=None
)


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block whose inputs
    require gradients are appended in execution order.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape | None:
    return _active_tape.get()


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


def record(out: np.ndarray, parents: Iterable[Tensor], vjp, op: str) -> Tensor:
    """Wrap ``out`` in a Tensor and, when training, append its backward rule to the tape."""
    check_finite(out, op)
    parents = tuple(parents)
    tape = _active_tape.get()
    needs = tape is not None and any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(t, parents, vjp))
    return t


def backward(tape: Tape, loss: Tensor, store=None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Returns the map id(tensor) -> gradient for every leaf that required
    gradients. If ``store`` is given, parameter gradients are accumulated into it.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if len(tape) == 0:
        raise ContractError("backward called on an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    produced = {id(n.out) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            target = grads if key in produced else leaves
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg
    if store is not None:
        store.accumulate(leaves)
    return leaves
