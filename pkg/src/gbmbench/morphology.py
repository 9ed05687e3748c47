"""Millimeter-aware binary morphology and voxel geometry.

Distances are exact Euclidean distances between voxel centers, with
anisotropic spacing folded in; dilation thresholds the distance field
with a closed ball (<= margin).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import ndimage

from .errors import EmptyRegionError
from .volume import GridMeta, Mask, ScalarVolume, ensure_compatible


@dataclass(frozen=True)
class WorldPoint:
    """A point in world coordinates (mm)."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"WorldPoint.{name} must be finite, got {v}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def distance_mm(self, other: "WorldPoint") -> float:
        return float(np.linalg.norm(self.as_array() - other.as_array()))


def empty_distance_sentinel(meta: GridMeta) -> float:
    """Distance value reported everywhere when the source mask is empty.

    Strictly larger than any realizable voxel-center distance on the grid.
    """
    return 2.0 * meta.diagonal_mm() + 1.0


def distance_transform(mask: Mask) -> ScalarVolume:
    """Exact Euclidean distance (mm) from each voxel center to the nearest
    true voxel center; 0 on true voxels, sentinel everywhere if empty."""
    meta = mask.meta
    if not mask.data.any():
        dist = np.full(meta.shape, empty_distance_sentinel(meta), dtype=np.float64)
    else:
        dist = ndimage.distance_transform_edt(~mask.data, sampling=meta.spacing)
    return ScalarVolume(meta, dist)


def dilate_mm(mask: Mask, margin_mm: float, restrict: Mask) -> Mask:
    """All voxels within ``margin_mm`` of the mask, clipped to ``restrict``."""
    ensure_compatible(mask.meta, restrict.meta)
    if margin_mm < 0:
        raise ValueError(f"margin must be >= 0, got {margin_mm}")
    if not mask.data.any():
        return Mask(mask.meta, np.zeros(mask.meta.shape, dtype=bool))
    dist = ndimage.distance_transform_edt(~mask.data, sampling=mask.meta.spacing)
    return Mask(mask.meta, (dist <= margin_mm) & restrict.data)


def center_of_mass(weights: Union[Mask, ScalarVolume]) -> WorldPoint:
    """Weight-averaged voxel-center position in world mm.

    Masks weigh 1 per true voxel. Raises EmptyRegionError on zero total
    weight.
    """
    w = weights.data.astype(np.float64)
    total = w.sum()
    if not total > 0:
        raise EmptyRegionError("center of mass of an empty (zero-weight) region")
    meta = weights.meta
    coords = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        marginal = w.sum(axis=other)
        coords.append(float(np.dot(marginal, meta.axis_coords(axis)) / total))
    return WorldPoint(*coords)


def volume_cm3(mask: Mask) -> float:
    """Physical volume of the mask in cm^3."""
    return mask.voxel_count * mask.meta.voxel_volume_mm3 / 1000.0
