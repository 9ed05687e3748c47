"""Radiation-plan generation: standard margin and iso-volumetric model plans.

The model plan selects exactly as many voxels as the standard plan by
ranking in-brain voxels on cell concentration (descending) with linear
voxel index as a deterministic tie-break, so iso-volumetry holds even on
heavily quantized cell maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DegenerateCellMapError, EmptyRegionError
from .growth_fk import CellMap
from .morphology import dilate_mm, volume_cm3
from .volume import Mask, ensure_compatible, read_volume, write_volume

DEFAULT_MARGIN_MM = 15.0


class PlanSource(Enum):
    STANDARD_MARGIN = "standard_margin"
    MODEL_THRESHOLD = "model_threshold"


@dataclass(frozen=True, eq=False)
class Plan:
    """A binary target volume plus its provenance."""

    target: Mask
    source: PlanSource
    margin_mm: float | None
    threshold: float | None
    voxel_count: int
    volume_cm3: float
    under_volumed: bool = False

    def __eq__(self, other):
        if not isinstance(other, Plan):
            return NotImplemented
        return (
            self.target == other.target
            and self.source == other.source
            and self.margin_mm == other.margin_mm
            and self.threshold == other.threshold
            and self.under_volumed == other.under_volumed
        )


def standard_plan(core: Mask, brain: Mask, margin_mm: float = DEFAULT_MARGIN_MM) -> Plan:
    """Dilate the tumor core by a uniform margin within the brain mask."""
    ensure_compatible(core.meta, brain.meta)
    if core.voxel_count == 0:
        raise EmptyRegionError("cannot build a standard plan from an empty core")
    target = dilate_mm(core, margin_mm, brain)
    return Plan(
        target=target,
        source=PlanSource.STANDARD_MARGIN,
        margin_mm=float(margin_mm),
        threshold=None,
        voxel_count=target.voxel_count,
        volume_cm3=volume_cm3(target),
    )


def model_plan(cellmap: CellMap, brain: Mask, target_voxels: int) -> Plan:
    """Top-k in-brain voxels of the cell map, k = min(target_voxels, N+).

    N+ counts in-brain voxels with positive concentration; when it falls
    short the plan is flagged under-volumed rather than padded. The
    recorded threshold is the concentration of the last selected voxel.
    """
    ensure_compatible(cellmap.meta, brain.meta)
    if target_voxels < 1:
        raise ValueError(f"target_voxels must be >= 1, got {target_voxels}")
    # Linear index in file order: (z*ny + y)*nx + x, i.e. x fastest.
    c = cellmap.data.reshape(-1, order="F")
    candidates = np.flatnonzero(brain.data.reshape(-1, order="F") & (c > 0))
    if candidates.size == 0:
        raise DegenerateCellMapError("cell map is zero everywhere inside the brain mask")
    k = min(int(target_voxels), int(candidates.size))
    vals = c[candidates]
    order = np.lexsort((candidates, -vals))
    chosen = candidates[order[:k]]
    flat = np.zeros(cellmap.meta.nvox, dtype=bool)
    flat[chosen] = True
    target = Mask(cellmap.meta, flat.reshape(cellmap.meta.shape, order="F"))
    return Plan(
        target=target,
        source=PlanSource.MODEL_THRESHOLD,
        margin_mm=None,
        threshold=float(c[chosen[-1]]),
        voxel_count=int(k),
        volume_cm3=volume_cm3(target),
        under_volumed=candidates.size < target_voxels,
    )


def plan_pair(
    core: Mask, brain: Mask, cellmap: CellMap, margin_mm: float = DEFAULT_MARGIN_MM
) -> tuple:
    """(standard plan, iso-volumetric model plan) for one subject."""
    standard = standard_plan(core, brain, margin_mm)
    model = model_plan(cellmap, brain, standard.voxel_count)
    return standard, model


def save_plan(plan: Plan, stem) -> None:
    """Persist a plan as <stem>.nii.gz plus a <stem>.json sidecar."""
    stem = Path(stem)
    write_volume(plan.target, stem.with_name(stem.name + ".nii.gz"))
    record = {
        "source": plan.source.value,
        "margin_mm": plan.margin_mm,
        "threshold": plan.threshold,
        "voxel_count": plan.voxel_count,
        "volume_cm3": plan.volume_cm3,
        "under_volumed": plan.under_volumed,
    }
    with open(stem.with_name(stem.name + ".json"), "w") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")


def load_plan(stem) -> Plan:
    """Load a plan persisted by :func:`save_plan`."""
    stem = Path(stem)
    target = read_volume(stem.with_name(stem.name + ".nii.gz"), as_mask=True)
    with open(stem.with_name(stem.name + ".json")) as fh:
        record = json.load(fh)
    return Plan(
        target=target,
        source=PlanSource(record["source"]),
        margin_mm=record["margin_mm"],
        threshold=record["threshold"],
        voxel_count=record["voxel_count"],
        volume_cm3=record["volume_cm3"],
        under_volumed=record["under_volumed"],
    )
