"""Per-subject evaluation: recurrence extraction, coverage, exploration
geometry."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np
from scipy import ndimage

from .errors import EmptyRegionError
from .morphology import center_of_mass, volume_cm3
from .plans import Plan
from .volume import (
    LABEL_EDEMA,
    LABEL_ENHANCING,
    LABEL_NECROSIS,
    LabelVolume,
    Mask,
    ensure_compatible,
)


class RecurrenceDefinition(Enum):
    """Which follow-up compartments count as recurrence."""

    ENHANCING = "enhancing"
    CORE = "core"
    FULL = "full"

    @property
    def label_set(self) -> tuple:
        return _LABEL_SETS[self]


_LABEL_SETS = {
    RecurrenceDefinition.ENHANCING: (LABEL_ENHANCING,),
    RecurrenceDefinition.CORE: (LABEL_NECROSIS, LABEL_ENHANCING),
    RecurrenceDefinition.FULL: (LABEL_NECROSIS, LABEL_EDEMA, LABEL_ENHANCING),
}

ALL_DEFINITIONS = (
    RecurrenceDefinition.ENHANCING,
    RecurrenceDefinition.CORE,
    RecurrenceDefinition.FULL,
)

# 26-connectivity for multifocality counting
_CONNECTIVITY = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class SubjectMetrics:
    """Evaluation record for one subject.

    ``coverage`` maps (plan name, recurrence definition) to the covered
    recurrence fraction; ``under_volumed`` maps plan name to its shortfall
    flag.
    """

    subject_id: str
    dataset: str
    coverage: Mapping
    preop_core_cm3: float
    recurrence_enh_cm3: float
    com_distance_cm: float
    multifocal: bool
    under_volumed: Mapping


def recurrence_region(followup: LabelVolume, definition: RecurrenceDefinition) -> Mask:
    """Mask of follow-up voxels whose label is in the definition's set."""
    return followup.label_mask(definition.label_set)


def coverage(plan: Plan, recurrence: Mask) -> float:
    """Covered fraction: |plan & recurrence| / |recurrence| (voxel counts)."""
    ensure_compatible(plan.target.meta, recurrence.meta)
    total = recurrence.voxel_count
    if total == 0:
        raise EmptyRegionError("coverage of an empty recurrence is undefined")
    hit = int(np.count_nonzero(plan.target.data & recurrence.data))
    return hit / total


def com_distance_cm(preop_core: Mask, recurrence_core: Mask) -> float:
    """Distance between the two centers of mass, in cm."""
    a = center_of_mass(preop_core)
    b = center_of_mass(recurrence_core)
    return a.distance_mm(b) / 10.0


def connected_component_count(mask: Mask) -> int:
    """Number of 26-connected components."""
    _, count = ndimage.label(mask.data, structure=_CONNECTIVITY)
    return int(count)


def subject_metrics(
    subject_id: str,
    dataset: str,
    preop: LabelVolume,
    followup: LabelVolume,
    plans: Mapping[str, Plan],
) -> SubjectMetrics:
    """Coverage of every plan against every recurrence definition, plus
    cohort-exploration geometry.

    Subjects whose follow-up lacks an enhancing recurrence are rejected
    (EmptyRegionError) rather than silently scored.
    """
    ensure_compatible(preop.meta, followup.meta, *(p.target.meta for p in plans.values()))
    enhancing = recurrence_region(followup, RecurrenceDefinition.ENHANCING)
    if enhancing.voxel_count == 0:
        raise EmptyRegionError(f"{subject_id}: follow-up has no enhancing recurrence")
    preop_core = preop.label_mask((LABEL_NECROSIS, LABEL_ENHANCING))
    if preop_core.voxel_count == 0:
        raise EmptyRegionError(f"{subject_id}: preoperative core is empty")
    recurrence_core = recurrence_region(followup, RecurrenceDefinition.CORE)

    cov = {}
    for name in plans:
        for definition in ALL_DEFINITIONS:
            cov[(name, definition)] = coverage(plans[name], recurrence_region(followup, definition))

    return SubjectMetrics(
        subject_id=subject_id,
        dataset=dataset,
        coverage=cov,
        preop_core_cm3=volume_cm3(preop_core),
        recurrence_enh_cm3=volume_cm3(enhancing),
        com_distance_cm=com_distance_cm(preop_core, recurrence_core),
        multifocal=connected_component_count(recurrence_core) > 1,
        under_volumed={name: plan.under_volumed for name, plan in plans.items()},
    )
