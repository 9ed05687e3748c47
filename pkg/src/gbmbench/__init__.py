"""Benchmark engine for individualized glioblastoma radiotherapy planning.

Simulates tumor-cell spread with a reaction-diffusion growth model,
builds standard-margin and iso-volumetric model-based radiation plans,
and scores recurrence coverage with paired nonparametric statistics over
cohorts of real or synthetic subjects.
"""

from .errors import (
    CohortError,
    DegenerateCellMapError,
    DegenerateDynamicsError,
    EmptyRegionError,
    GbmBenchError,
    GridCompatibilityError,
    ManifestError,
    NumericalInstabilityError,
    PhantomGenerationError,
    VolumeCorruptionError,
    VolumeFormatError,
)
from .growth_fk import (
    CalibrationConfig,
    CalibrationResult,
    CellMap,
    GrowthParams,
    TissueMaps,
    build_diffusion_field,
    calibrate_fk,
    predict_cellmap,
    seed_initial_condition,
    simulate_fk,
    stable_dt,
)
from .harness import (
    CohortResults,
    Manifest,
    RunConfig,
    SkipRecord,
    SubjectEntry,
    emit_report,
    load_manifest,
    run_cohort,
    run_subject,
)
from .metrics import (
    RecurrenceDefinition,
    SubjectMetrics,
    coverage,
    com_distance_cm,
    recurrence_region,
    subject_metrics,
)
from .morphology import (
    WorldPoint,
    center_of_mass,
    dilate_mm,
    distance_transform,
    volume_cm3,
)
from .phantom import PhantomConfig, PhantomSubject, generate_cohort, generate_phantom_subject
from .plans import Plan, PlanSource, model_plan, plan_pair, standard_plan
from .stats import (
    AggregateRow,
    Alternative,
    Method,
    WilcoxonResult,
    aggregate,
    mean_stderr,
    wilcoxon_signed_rank,
)
from .volume import (
    GridMeta,
    LabelVolume,
    Mask,
    ScalarVolume,
    grids_compatible,
    read_volume,
    write_volume,
)

__version__ = "0.1.0"
