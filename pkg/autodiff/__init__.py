from autodiff.tensor import (
    ContractViolation,
    GraphIntegrityError,
    Node,
    Precision,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    detach,
    fresh_tape,
    get_precision,
    no_grad,
    set_precision,
    tolerances,
)
from autodiff.optim import AdamState, NonFiniteGradient, adam_step
from autodiff.conv import conv2d, conv3d, conv3d_transposed
from autodiff import ops

__all__ = [
    "AdamState",
    "ContractViolation",
    "GraphIntegrityError",
    "Node",
    "NonFiniteGradient",
    "Precision",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "conv2d",
    "conv3d",
    "conv3d_transposed",
    "default_dtype",
    "detach",
    "fresh_tape",
    "get_precision",
    "no_grad",
    "ops",
    "set_precision",
    "tolerances",
]
