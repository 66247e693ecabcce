# xct/losses.py

"""
Generator and discriminator objectives.

All norms are means over elements (batch, voxels, pixels or patch scores),
so the λ weights keep their meaning across resolutions.

    L_G = λ1·L_lsgan + λ2·L_re + λ3·L_pl + λ4·L_sind
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from autodiff import ContractViolation, Node, as_tensor, ops
from xct.config import LossWeights
from xct.projection import Plane, mean_projection, project_node
from xct.volume import Volume, XrayImage

# Target-side projections for L_pl, in the order axial, coronal, sagittal.
_PLANES = (Plane.axial, Plane.coronal, Plane.sagittal)


@dataclass(frozen=True)
class LossParts:
    lsgan: Node | None = None
    re: Node | None = None
    pl: Node | None = None
    sind: Node | None = None


@dataclass(frozen=True)
class LossReport:
    l_total: float
    l_lsgan: float | None = None
    l_re: float | None = None
    l_pl: float | None = None
    l_sind: float | None = None
    l_disc: float | None = None

    def as_dict(self) -> dict[str, float | None]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ----------------------------
# Targets
# ----------------------------


def volume_batch(gt: Volume | Sequence[Volume] | np.ndarray) -> np.ndarray:
    """(batch, 1, D, H, W) array in the working dtype."""
    if isinstance(gt, Volume):
        gt = [gt]
    if isinstance(gt, np.ndarray):
        return as_tensor(gt)
    return as_tensor(np.stack([v.voxels for v in gt])[:, None])


def xray_batch(x: XrayImage | Sequence[XrayImage] | np.ndarray) -> np.ndarray:
    """(batch, 1, H, W) array in the working dtype."""
    if isinstance(x, XrayImage):
        x = [x]
    if isinstance(x, np.ndarray):
        return as_tensor(x)
    return as_tensor(np.stack([img.pixels for img in x])[:, None])


def _require_shape(what: str, got: tuple[int, ...], expected: tuple[int, ...]):
    if got != expected:
        raise ContractViolation(f"{what}: target shape {got} does not match prediction {expected}")


# ----------------------------
# Generator terms
# ----------------------------


def loss_lsgan_g(fake_scores: Node) -> Node:
    """½ · mean((D(G(x)|x) − 1)²)."""
    return ops.mul_scalar(ops.mean_all(ops.square(ops.add_scalar(fake_scores, -1.0))), 0.5)


def loss_reconstruction(pred: Node, gt: Volume | Sequence[Volume] | np.ndarray) -> Node:
    target = volume_batch(gt)
    _require_shape("loss_reconstruction", target.shape, pred.shape)
    return ops.mean_all(ops.square(ops.sub(pred, ops.constant(target))))


def loss_projection(pred: Node, gt: Volume | Sequence[Volume] | np.ndarray) -> Node:
    """Mean over axial, coronal and sagittal of the mean |Proj(y) − Proj(G(x))|."""
    target = volume_batch(gt)
    _require_shape("loss_projection", target.shape, pred.shape)

    terms = []
    for plane in _PLANES:
        projected = np.stack([mean_projection(v[0], plane) for v in target])[:, None]
        diff = ops.sub(ops.constant(projected), project_node(pred, plane))
        terms.append(ops.mean_all(ops.abs_val(diff)))

    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return ops.mul_scalar(total, 1 / len(terms))


def loss_shape_induction(pred: Node, x: XrayImage | Sequence[XrayImage] | np.ndarray) -> Node:
    """Mean squared error between the coronal projection of ``pred`` and the X-ray."""
    target = xray_batch(x)
    projected = project_node(pred, Plane.coronal)
    if target.shape != projected.shape:
        raise ContractViolation(
            f"loss_shape_induction: x-ray {target.shape[2:]} does not match "
            f"coronal face {projected.shape[2:]}"
        )
    return ops.mean_all(ops.square(ops.sub(projected, ops.constant(target))))


def loss_total(weights: LossWeights, parts: LossParts) -> tuple[Node, LossReport]:
    """
    λ-weighted sum of the present terms.

    The report's ``l_total`` is recomputed in float64 from the reported
    parts, so a log line always equals its own weighted sum.
    """
    weighted = [
        (weights.lambda1, parts.lsgan),
        (weights.lambda2, parts.re),
        (weights.lambda3, parts.pl),
        (weights.lambda4, parts.sind),
    ]
    present = [(w, node) for w, node in weighted if node is not None]
    if not present:
        raise ContractViolation("loss_total needs at least one loss term")

    total = ops.mul_scalar(present[0][1], present[0][0])
    for w, node in present[1:]:
        total = ops.add(total, ops.mul_scalar(node, w))

    def value(node: Node | None) -> float | None:
        return None if node is None else node.item()

    report = LossReport(
        l_total=float(sum(w * node.item() for w, node in present)),
        l_lsgan=value(parts.lsgan),
        l_re=value(parts.re),
        l_pl=value(parts.pl),
        l_sind=value(parts.sind),
    )
    return total, report


# ----------------------------
# Discriminator
# ----------------------------


def loss_discriminator(real_scores: Node, fake_scores: Node) -> Node:
    """
    ½ · mean((D(y|x) − 1)²) + ½ · mean(D(G(x)|x)²).

    ``fake_scores`` must come from a detached generator output so this loss
    never reaches generator parameters.
    """
    real = ops.mean_all(ops.square(ops.add_scalar(real_scores, -1.0)))
    fake = ops.mean_all(ops.square(fake_scores))
    return ops.mul_scalar(ops.add(real, fake), 0.5)
