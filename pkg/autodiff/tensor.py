# autodiff/tensor.py

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Protocol, Sequence

import numpy as np
import numpy.typing as npt

# A Tensor is a dense row-major numpy array; shape and data travel together.
Tensor = npt.NDArray[np.floating]


class ContractViolation(ValueError):
    """An operation was called outside its documented pre-conditions."""


class GraphIntegrityError(RuntimeError):
    """The recorded graph reaches a node that is not on the active tape."""


# ----------------------------
# Precision policy
# ----------------------------


class Precision(Enum):
    float32 = "float32"
    float64 = "float64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


@dataclass(frozen=True)
class Tolerances:
    gradcheck_step: float
    gradcheck_rel: float
    oracle_abs: float
    loss_abs: float


TOLERANCES: dict[Precision, Tolerances] = {
    Precision.float64: Tolerances(
        gradcheck_step=1e-5, gradcheck_rel=1e-4, oracle_abs=1e-9, loss_abs=1e-12
    ),
    Precision.float32: Tolerances(
        gradcheck_step=1e-2, gradcheck_rel=5e-2, oracle_abs=1e-4, loss_abs=1e-6
    ),
}

_PRECISION = Precision.float32


def set_precision(precision: Precision | str) -> Precision:
    """Switch the process-wide dtype. Returns the previous setting."""
    global _PRECISION

    if isinstance(precision, str):
        try:
            precision = Precision(precision)
        except ValueError as e:
            raise ValueError(
                f"Invalid precision: {precision!r}. "
                f"Valid values: {[p.value for p in Precision]}"
            ) from e

    previous, _PRECISION = _PRECISION, precision
    return previous


def get_precision() -> Precision:
    return _PRECISION


def default_dtype() -> np.dtype:
    return _PRECISION.dtype


def tolerances() -> Tolerances:
    return TOLERANCES[_PRECISION]


def as_tensor(data: npt.ArrayLike) -> Tensor:
    return np.asarray(data, dtype=default_dtype())


# ----------------------------
# Nodes and the tape
# ----------------------------


class Backward(Protocol):
    op: str

    def backward(self, grad: Tensor) -> Sequence[Tensor | None]: ...


class Node:
    """A value on the autodiff graph.

    Leaves (parameters and constants) live outside any tape. Every other node
    is recorded on the tape that was active when its op ran.
    """

    __slots__ = (
        "value",
        "grad",
        "op",
        "parents",
        "requires_grad",
        "name",
        "fn",
        "index",
        "_tape",
        "_generation",
    )

    def __init__(
        self,
        value: Tensor,
        *,
        op: str = "leaf",
        parents: tuple[Node, ...] = (),
        requires_grad: bool = False,
        name: str | None = None,
        fn: Backward | None = None,
    ):
        self.value = value
        self.grad: Tensor | None = None
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name
        self.fn = fn
        self.index = -1
        self._tape: Tape | None = None
        self._generation = -1

    @classmethod
    def leaf(
        cls, value: npt.ArrayLike, *, requires_grad: bool = False, name: str | None = None
    ) -> Node:
        return cls(as_tensor(value), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.fn is None

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractViolation(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Topologically ordered record of the nodes built since the last reset."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Node) -> Node:
        node._tape = self
        node._generation = self.generation
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def owns(self, node: Node) -> bool:
        return node._tape is self and node._generation == self.generation

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1


_ACTIVE_TAPE = Tape()
_GRAD_ENABLED = True


@contextlib.contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Run a block against a new, empty tape; the previous tape is restored."""
    global _ACTIVE_TAPE

    previous, _ACTIVE_TAPE = _ACTIVE_TAPE, Tape()
    try:
        yield _ACTIVE_TAPE
    finally:
        _ACTIVE_TAPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED

    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def emit(value: Tensor, fn: Backward, parents: tuple[Node, ...]) -> Node:
    """Wrap an op result; record it only if some input needs a gradient."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        node = Node(value, op=fn.op, parents=parents, requires_grad=True, fn=fn)
        return _ACTIVE_TAPE.record(node)

    return Node(value, op=fn.op)


def detach(node: Node) -> Node:
    return Node(node.value, op="detach")


# ----------------------------
# Reverse-mode accumulation
# ----------------------------


def backward(loss: Node) -> dict[str, Tensor]:
    """
    Accumulate d(loss)/d(node) for every node reachable from a scalar loss.

    Parameters
    ----------
    loss : Node
        Scalar (shape ``()``) produced by registered ops on the active tape.

    Returns
    -------
    dict[str, Tensor]
        Gradients of the named leaves, keyed by leaf name. Unnamed leaves
        still get ``.grad`` set.
    """
    if loss.shape != ():
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")

    tape = loss._tape
    if tape is None or not tape.owns(loss):
        raise GraphIntegrityError("loss is not recorded on the active tape")

    pending: dict[int, Tensor] = {loss.index: np.ones((), dtype=loss.value.dtype)}
    leaves: dict[int, tuple[Node, Tensor]] = {}

    for node in reversed(tape.nodes[: loss.index + 1]):
        grad = pending.pop(node.index, None)
        if grad is None:
            continue

        node.grad = grad
        parent_grads = node.fn.backward(grad)

        for parent, parent_grad in zip(node.parents, parent_grads, strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue

            if parent_grad.shape != parent.shape:
                raise ContractViolation(
                    f"{node.op} produced a gradient of shape {parent_grad.shape} "
                    f"for an input of shape {parent.shape}"
                )

            if parent.is_leaf:
                key = id(parent)
                if key in leaves:
                    parent_grad = leaves[key][1] + parent_grad
                leaves[key] = (parent, parent_grad)

            elif tape.owns(parent) and parent.index < node.index:
                if parent.index in pending:
                    parent_grad = pending[parent.index] + parent_grad
                pending[parent.index] = parent_grad

            else:
                raise GraphIntegrityError(
                    f"{parent.op!r} node feeding {node.op!r} is not on the active tape"
                )

    grads: dict[str, Tensor] = {}
    for leaf, grad in leaves.values():
        leaf.grad = grad
        if leaf.name is not None:
            grads[leaf.name] = grad

    return grads
