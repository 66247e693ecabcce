# autodiff/optim.py

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from autodiff.tensor import ContractViolation, Node, Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, param: str, max_abs: float):
        super().__init__(f"non-finite gradient for parameter {param!r}")
        self.param = param
        self.max_abs = max_abs


@dataclass(frozen=True)
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Mapping[str, Tensor] = field(default_factory=dict)
    v: Mapping[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ContractViolation(f"learning rate must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractViolation("Adam betas must lie in [0, 1)")


def adam_step(
    params: Mapping[str, Node], grads: Mapping[str, Tensor], state: AdamState
) -> AdamState:
    """
    One bias-corrected adaptive-moment update.

    Parameter values are replaced in place on their leaf nodes; a parameter
    absent from ``grads`` is updated with a zero gradient.

    Raises
    ------
    NonFiniteGradient
        Before touching any parameter, naming the first offending one.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            finite = np.abs(g[np.isfinite(g)])
            raise NonFiniteGradient(name, float(finite.max()) if finite.size else float("nan"))

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1**step
    correction2 = 1 - b2**step

    m: dict[str, Tensor] = {}
    v: dict[str, Tensor] = {}

    for name, param in params.items():
        p = param.value
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ContractViolation(f"gradient {g.shape} does not match parameter {name!r} {p.shape}")

        m_prev = state.m.get(name, np.zeros_like(p))
        v_prev = state.v.get(name, np.zeros_like(p))

        m[name] = (b1 * m_prev + (1 - b1) * g).astype(p.dtype)
        v[name] = (b2 * v_prev + (1 - b2) * g * g).astype(p.dtype)

        update = state.lr * (m[name] / correction1) / (np.sqrt(v[name] / correction2) + state.epsilon)
        param.value = (p - update).astype(p.dtype)

    return replace(state, step=step, m=m, v=v)
