# autodiff/ops.py

from __future__ import annotations

from typing import Any, Sequence

import numpy as np
import numpy.typing as npt
from typing_extensions import override

from autodiff.registry import register_op
from autodiff.tensor import ContractViolation, Node, Tensor, as_tensor, emit


# ----------------------------
# Metaclass
# ----------------------------


class FunctionMeta(type):
    def __new__(mcls, name, bases, namespace):
        cls = super().__new__(mcls, name, bases, namespace)

        op = namespace.get("op")
        if op is not None:
            register_op(op, cls)

        return cls


# ----------------------------
# Function
# ----------------------------


class Function(metaclass=FunctionMeta):
    """
    One differentiable operation.

    Subclasses set ``op`` (which registers them) and implement ``forward`` on
    raw arrays and ``backward``, which maps the gradient of the output to one
    gradient (or None) per input.
    """

    op: str

    def __init__(self, **attrs: Any):
        self.attrs = attrs

    def forward(self, *values: Tensor) -> Tensor:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: Node, **attrs: Any) -> Node:
        fn = cls(**attrs)
        value = fn.forward(*(node.value for node in inputs))
        return emit(value, fn, inputs)


def _lift(x: Node | float) -> Node:
    if isinstance(x, Node):
        return x
    return Node.leaf(x)


def _check_broadcast(op: str, a: tuple[int, ...], b: tuple[int, ...]):
    if a != b and a != () and b != ():
        raise ContractViolation(
            f"{op}: shapes {a} and {b} are incompatible "
            f"(only scalar-with-tensor broadcasting is supported)"
        )


def _reduce_to(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype)


def _check_axis(op: str, axis: int, rank: int):
    if not 0 <= axis < rank:
        raise ContractViolation(f"{op}: axis {axis} out of range for rank {rank}")


# ----------------------------
# Elementwise
# ----------------------------


class Add(Function):
    op = "add"

    @override
    def forward(self, a, b):
        _check_broadcast(self.op, a.shape, b.shape)
        self.shapes = a.shape, b.shape
        return a + b

    @override
    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Sub(Function):
    op = "sub"

    @override
    def forward(self, a, b):
        _check_broadcast(self.op, a.shape, b.shape)
        self.shapes = a.shape, b.shape
        return a - b

    @override
    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(-grad, self.shapes[1])


class Mul(Function):
    op = "mul"

    @override
    def forward(self, a, b):
        _check_broadcast(self.op, a.shape, b.shape)
        self.saved = a, b
        return a * b

    @override
    def backward(self, grad):
        a, b = self.saved
        return _reduce_to(grad * b, a.shape), _reduce_to(grad * a, b.shape)


class AddScalar(Function):
    op = "add_scalar"

    @override
    def forward(self, x):
        return x + self.attrs["c"]

    @override
    def backward(self, grad):
        return (grad,)


class MulScalar(Function):
    op = "mul_scalar"

    @override
    def forward(self, x):
        return x * self.attrs["c"]

    @override
    def backward(self, grad):
        return (grad * self.attrs["c"],)


class Relu(Function):
    op = "relu"

    @override
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    @override
    def backward(self, grad):
        return (grad * self.mask,)


class LeakyRelu(Function):
    op = "leaky_relu"

    @override
    def forward(self, x):
        self.slope_map = np.where(x > 0, 1.0, self.attrs["slope"]).astype(x.dtype)
        return x * self.slope_map

    @override
    def backward(self, grad):
        return (grad * self.slope_map,)


class Sigmoid(Function):
    op = "sigmoid"

    @override
    def forward(self, x):
        # exp(-log(1 + exp(-x))) stays finite for large |x|
        self.out = np.exp(-np.logaddexp(0, -x)).astype(x.dtype)
        return self.out

    @override
    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Square(Function):
    op = "square"

    @override
    def forward(self, x):
        self.x = x
        return x * x

    @override
    def backward(self, grad):
        return (2 * self.x * grad,)


class AbsVal(Function):
    op = "abs_val"

    @override
    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    @override
    def backward(self, grad):
        return (grad * self.sign,)


# ----------------------------
# Reductions
# ----------------------------


class SumAll(Function):
    op = "sum"

    @override
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    @override
    def backward(self, grad):
        return (np.full(self.shape, grad, dtype=grad.dtype),)


class MeanAll(Function):
    op = "mean"

    @override
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    @override
    def backward(self, grad):
        return (np.full(self.shape, grad / max(int(np.prod(self.shape)), 1), dtype=grad.dtype),)


class MeanAlongAxis(Function):
    op = "mean_along_axis"

    @override
    def forward(self, x):
        axis = self.attrs["axis"]
        _check_axis(self.op, axis, x.ndim)
        self.shape = x.shape
        return x.mean(axis=axis)

    @override
    def backward(self, grad):
        axis = self.attrs["axis"]
        spread = np.expand_dims(grad / self.shape[axis], axis)
        return (np.broadcast_to(spread, self.shape).copy(),)


class MaxAlongAxis(Function):
    op = "max_along_axis"

    @override
    def forward(self, x):
        axis = self.attrs["axis"]
        _check_axis(self.op, axis, x.ndim)
        self.shape = x.shape
        self.index = np.expand_dims(np.argmax(x, axis=axis), axis)
        return np.take_along_axis(x, self.index, axis=axis).squeeze(axis)

    @override
    def backward(self, grad):
        # ties route the whole gradient to the first maximum
        axis = self.attrs["axis"]
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(out, self.index, np.expand_dims(grad, axis), axis=axis)
        return (out,)


# ----------------------------
# Shape
# ----------------------------


class Reshape(Function):
    op = "reshape"

    @override
    def forward(self, x):
        shape = tuple(self.attrs["shape"])
        if int(np.prod(shape)) != x.size:
            raise ContractViolation(f"reshape: cannot view {x.shape} as {shape}")
        self.shape = x.shape
        return x.reshape(shape)

    @override
    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Concat(Function):
    op = "concat"

    @override
    def forward(self, *xs):
        axis = self.attrs["axis"]
        _check_axis(self.op, axis, xs[0].ndim)
        for x in xs[1:]:
            if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != axis
            ):
                raise ContractViolation(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    @override
    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.attrs["axis"]))


class Replicate(Function):
    """Insert a new axis of length ``count`` holding copies of the input."""

    op = "replicate"

    @override
    def forward(self, x):
        axis, count = self.attrs["axis"], self.attrs["count"]
        _check_axis(self.op, axis, x.ndim + 1)
        if count < 1:
            raise ContractViolation(f"replicate: count must be >= 1, got {count}")
        return np.repeat(np.expand_dims(x, axis), count, axis=axis)

    @override
    def backward(self, grad):
        return (grad.sum(axis=self.attrs["axis"]),)


# ----------------------------
# Layers
# ----------------------------


class BiasAdd(Function):
    """Per-channel bias along axis 1 of a (batch, channels, ...) tensor."""

    op = "bias_add"

    @override
    def forward(self, x, bias):
        if x.ndim < 2 or bias.shape != (x.shape[1],):
            raise ContractViolation(f"bias_add: bias {bias.shape} does not match channels of {x.shape}")
        self.axes = (0, *range(2, x.ndim))
        return x + bias.reshape((1, -1) + (1,) * (x.ndim - 2))

    @override
    def backward(self, grad):
        return grad, grad.sum(axis=self.axes)


class MatMul(Function):
    op = "matmul"

    @override
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractViolation(f"matmul: cannot multiply {a.shape} by {b.shape}")
        self.saved = a, b
        return a @ b

    @override
    def backward(self, grad):
        a, b = self.saved
        return grad @ b.T, a.T @ grad


class Softmax(Function):
    op = "softmax"

    @override
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    @override
    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""

    op = "cross_entropy"

    @override
    def forward(self, logits):
        labels = np.asarray(self.attrs["labels"], dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ContractViolation(
                f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree"
            )
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        self.probs = np.exp(log_p)
        self.labels = labels
        rows = np.arange(len(labels))
        return np.asarray(-log_p[rows, labels].mean(), dtype=logits.dtype)

    @override
    def backward(self, grad):
        n = len(self.labels)
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1
        return (d * (grad / n),)


class Dropout(Function):
    op = "dropout"

    @override
    def forward(self, x):
        p, rng = self.attrs["p"], self.attrs["rng"]
        if not 0 <= p < 1:
            raise ContractViolation(f"dropout: p must be in [0, 1), got {p}")
        keep = rng.random(x.shape) >= p
        self.mask = (keep / (1 - p)).astype(x.dtype)
        return x * self.mask

    @override
    def backward(self, grad):
        return (grad * self.mask,)


# ----------------------------
# Functional API
# ----------------------------


def constant(data: npt.ArrayLike) -> Node:
    return Node.leaf(as_tensor(data))


def add(a: Node | float, b: Node | float) -> Node:
    return Add.apply(_lift(a), _lift(b))


def sub(a: Node | float, b: Node | float) -> Node:
    return Sub.apply(_lift(a), _lift(b))


def mul(a: Node | float, b: Node | float) -> Node:
    return Mul.apply(_lift(a), _lift(b))


def add_scalar(x: Node, c: float) -> Node:
    return AddScalar.apply(x, c=c)


def mul_scalar(x: Node, c: float) -> Node:
    return MulScalar.apply(x, c=c)


def relu(x: Node) -> Node:
    return Relu.apply(x)


def leaky_relu(x: Node, slope: float = 0.2) -> Node:
    return LeakyRelu.apply(x, slope=slope)


def sigmoid(x: Node) -> Node:
    return Sigmoid.apply(x)


def square(x: Node) -> Node:
    return Square.apply(x)


def abs_val(x: Node) -> Node:
    return AbsVal.apply(x)


def sum_all(x: Node) -> Node:
    return SumAll.apply(x)


def mean_all(x: Node) -> Node:
    return MeanAll.apply(x)


def mean_along_axis(x: Node, axis: int) -> Node:
    return MeanAlongAxis.apply(x, axis=axis)


def max_along_axis(x: Node, axis: int) -> Node:
    return MaxAlongAxis.apply(x, axis=axis)


def reshape(x: Node, shape: Sequence[int]) -> Node:
    return Reshape.apply(x, shape=tuple(shape))


def concat(xs: Sequence[Node], axis: int) -> Node:
    return Concat.apply(*xs, axis=axis)


def replicate(x: Node, axis: int, count: int) -> Node:
    return Replicate.apply(x, axis=axis, count=count)


def bias_add(x: Node, bias: Node) -> Node:
    return BiasAdd.apply(x, bias)


def matmul(a: Node, b: Node) -> Node:
    return MatMul.apply(a, b)


def softmax(x: Node) -> Node:
    return Softmax.apply(x)


def cross_entropy(logits: Node, labels: npt.ArrayLike) -> Node:
    return CrossEntropy.apply(logits, labels=labels)


def dropout(x: Node, p: float, rng: np.random.Generator) -> Node:
    if p == 0:
        return x
    return Dropout.apply(x, p=p, rng=rng)
