# xct/projection.py

"""
Parallel-beam mean projections of CT volumes.

The DRR mapping is the coronal mean projection: each pixel averages the
voxels along one anterior→posterior ray, so projections stay in [0, 1] like
X-ray pixels. The shape-induction loss uses the same projection, bound to
``Plane.coronal`` by name.

``project_mean`` and ``drr`` run the same reduction as ``project_node``, so
an image and the differentiable projection of the same voxels agree bit for
bit in either precision.
"""

import numpy as np

from autodiff import ContractViolation, Node, no_grad, ops
from xct.volume import Plane, StyleTag, Volume, XrayImage

__all__ = ["Plane", "mean_projection", "project_mean", "drr", "project_node"]


def mean_projection(voxels: np.ndarray, plane: Plane) -> np.ndarray:
    """Mean of a (D, H, W) array along the axis ``plane`` collapses, in float64."""
    if voxels.ndim != 3:
        raise ContractViolation(f"expected a (D, H, W) array, got shape {voxels.shape}")
    return voxels.astype(np.float64).mean(axis=plane.axis)


def project_mean(volume: Volume, plane: Plane) -> XrayImage:
    with no_grad():
        image = project_node(ops.constant(volume.voxels[None, None]), plane)
    return XrayImage(image.value[0, 0], StyleTag.drr)


def drr(volume: Volume) -> XrayImage:
    return project_mean(volume, Plane.coronal)


def project_node(volume: Node, plane: Plane) -> Node:
    """(batch, 1, D, H, W) → (batch, 1, ·, ·), differentiable."""
    if volume.value.ndim != 5:
        raise ContractViolation(
            f"project_node expects (batch, channels, D, H, W), got {volume.shape}"
        )
    return ops.mean_along_axis(volume, 2 + plane.axis)
