# autodiff/gradcheck.py

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from autodiff.tensor import Node, Tensor, backward, fresh_tape, no_grad, tolerances


def numerical_gradient(f: Callable[[], float], x: Tensor, h: float) -> Tensor:
    """Central differences of ``f`` in every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        original = x[idx]
        x[idx] = original + h
        f_plus = f()
        x[idx] = original - h
        f_minus = f()
        x[idx] = original
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """
    Largest elementwise error relative to the larger of the two values,
    floored at a thousandth of the largest gradient magnitude.
    """
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    floor = max(scale * 1e-3, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check_gradients(
    build: Callable[[Sequence[Node]], Node],
    inputs: Sequence[Tensor],
    h: float | None = None,
) -> float:
    """
    Compare reverse-mode gradients of ``build(leaves)`` against central
    finite differences for every element of every input.

    Returns
    -------
    float
        The worst relative error over all inputs.
    """
    h = tolerances().gradcheck_step if h is None else h
    leaves = [Node.leaf(np.array(x), requires_grad=True, name=f"input{i}") for i, x in enumerate(inputs)]

    with fresh_tape():
        grads = backward(build(leaves))

    def evaluate() -> float:
        with no_grad():
            return build(leaves).item()

    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf.name, np.zeros_like(leaf.value))
        numeric = numerical_gradient(evaluate, leaf.value, h)
        worst = max(worst, relative_error(analytic, numeric))

    return worst
