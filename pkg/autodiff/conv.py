# autodiff/conv.py

"""
Strided, zero-padded cross-correlation in 2 and 3 spatial dimensions and the
transposed 3D variant.

Every kernel tap is one ``tensordot`` over the channel axis applied to a
strided view of the padded input, so memory stays at one patch per tap.
"""

from __future__ import annotations

import itertools

import numpy as np
from typing_extensions import override

from autodiff.ops import Function
from autodiff.tensor import ContractViolation, Node, Tensor


def _taps(kernel_shape: tuple[int, ...]):
    return itertools.product(*(range(k) for k in kernel_shape))


def _window(tap: tuple[int, ...], stride: int, out_shape: tuple[int, ...]):
    return (slice(None), slice(None)) + tuple(
        slice(t, t + stride * (n - 1) + 1, stride) for t, n in zip(tap, out_shape)
    )


def _kernel_tap(w: Tensor, tap: tuple[int, ...]) -> Tensor:
    return w[(slice(None), slice(None)) + tap]


def _correlate(xp: Tensor, w: Tensor, stride: int, out_shape: tuple[int, ...]) -> Tensor:
    """(b, cin, *padded) ⋆ (cout, cin, *k) → (b, cout, *out)."""
    acc = np.zeros((xp.shape[0], *out_shape, w.shape[0]), dtype=xp.dtype)
    for tap in _taps(w.shape[2:]):
        patch = xp[_window(tap, stride, out_shape)]
        acc += np.tensordot(patch, _kernel_tap(w, tap), axes=([1], [1]))
    return np.moveaxis(acc, -1, 1)


def _scatter(g: Tensor, w: Tensor, stride: int, full_shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``_correlate`` in its input: (b, cout, *out) → (b, cin, *full)."""
    out_shape = g.shape[2:]
    g_last = np.moveaxis(g, 1, -1)
    acc = np.zeros((g.shape[0], w.shape[1], *full_shape), dtype=g.dtype)
    for tap in _taps(w.shape[2:]):
        contribution = np.tensordot(g_last, _kernel_tap(w, tap), axes=([-1], [0]))
        acc[_window(tap, stride, out_shape)] += np.moveaxis(contribution, -1, 1)
    return acc


def _kernel_grad(xp: Tensor, g: Tensor, stride: int, kernel_shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``_correlate`` in its kernel: → (g channels, xp channels, *k)."""
    out_shape = g.shape[2:]
    spatial = list(range(2, g.ndim))
    dw = np.empty((g.shape[1], xp.shape[1], *kernel_shape), dtype=xp.dtype)
    for tap in _taps(kernel_shape):
        patch = xp[_window(tap, stride, out_shape)]
        dw[(slice(None), slice(None)) + tap] = np.tensordot(
            g, patch, axes=([0, *spatial], [0, *spatial])
        )
    return dw


def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * (x.ndim - 2))


def _crop(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return x[(slice(None), slice(None)) + (slice(padding, -padding),) * (x.ndim - 2)]


def _check_common(op: str, spatial: int, x: Tensor, w: Tensor, stride: int, padding: int):
    rank = spatial + 2
    if x.ndim != rank or w.ndim != rank:
        raise ContractViolation(
            f"{op}: expected rank-{rank} input and kernel, got {x.shape} and {w.shape}"
        )
    if stride < 1 or padding < 0:
        raise ContractViolation(f"{op}: stride must be >= 1 and padding >= 0")


# ----------------------------
# Ops
# ----------------------------


class _Convolution(Function):
    spatial: int

    @override
    def forward(self, x, w):
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        _check_common(self.op, self.spatial, x, w, stride, padding)

        if w.shape[1] != x.shape[1]:
            raise ContractViolation(
                f"{self.op}: kernel expects {w.shape[1]} input channels, got {x.shape[1]}"
            )

        xp = _pad(x, padding)
        if any(k > n for k, n in zip(w.shape[2:], xp.shape[2:])):
            raise ContractViolation(
                f"{self.op}: kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}"
            )

        out_shape = tuple((n - k) // stride + 1 for n, k in zip(xp.shape[2:], w.shape[2:]))
        self.saved = xp, w
        return _correlate(xp, w, stride, out_shape)

    @override
    def backward(self, grad):
        xp, w = self.saved
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        dx = _crop(_scatter(grad, w, stride, xp.shape[2:]), padding)
        dw = _kernel_grad(xp, grad, stride, w.shape[2:])
        return dx, dw


class Conv2d(_Convolution):
    op = "conv2d"
    spatial = 2


class Conv3d(_Convolution):
    op = "conv3d"
    spatial = 3


class ConvTranspose3d(Function):
    """Kernel layout (cin, cout, kd, kh, kw); output side (n - 1)·s − 2p + k."""

    op = "conv3d_transposed"

    @override
    def forward(self, x, w):
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        _check_common(self.op, 3, x, w, stride, padding)

        if w.shape[0] != x.shape[1]:
            raise ContractViolation(
                f"{self.op}: kernel expects {w.shape[0]} input channels, got {x.shape[1]}"
            )

        full = tuple((n - 1) * stride + k for n, k in zip(x.shape[2:], w.shape[2:]))
        if any(f - 2 * padding < 1 for f in full):
            raise ContractViolation(f"{self.op}: padding {padding} leaves an empty output")

        self.saved = x, w
        return _crop(_scatter(x, w, stride, full), padding)

    @override
    def backward(self, grad):
        x, w = self.saved
        stride, padding = self.attrs["stride"], self.attrs["padding"]
        gp = _pad(grad, padding)
        dx = _correlate(gp, w, stride, x.shape[2:])
        dw = _kernel_grad(gp, x, stride, w.shape[2:])
        return dx, dw


def output_size(n: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def transposed_output_size(n: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (n - 1) * stride - 2 * padding + kernel


def conv2d(x: Node, kernel: Node, stride: int = 1, padding: int = 0) -> Node:
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)


def conv3d(x: Node, kernel: Node, stride: int = 1, padding: int = 0) -> Node:
    return Conv3d.apply(x, kernel, stride=stride, padding=padding)


def conv3d_transposed(x: Node, kernel: Node, stride: int = 1, padding: int = 0) -> Node:
    return ConvTranspose3d.apply(x, kernel, stride=stride, padding=padding)
