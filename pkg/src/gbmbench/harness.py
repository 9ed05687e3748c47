"""Manifest-driven cohort orchestration and report emission.

A manifest (JSON) lists subjects with paths to pre-registered volumes;
the harness loads each subject, obtains cell maps (built-in growth model
or ingested files), builds iso-volumetric plan pairs, scores recurrence
coverage, and aggregates cohort statistics. Per-subject failures become
skip records and never abort the cohort; outputs are deterministic
regardless of parallelism.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import CohortError, GbmBenchError, GridCompatibilityError, ManifestError
from .growth_fk import CalibrationConfig, CellMap, TissueMaps, predict_cellmap
from .metrics import (
    ALL_DEFINITIONS,
    RecurrenceDefinition,
    SubjectMetrics,
    subject_metrics,
)
from .plans import Plan, model_plan, save_plan, standard_plan
from .stats import (
    EXACT_CUTOFF,
    STANDARD_PLAN_NAME,
    AggregateRow,
    Alternative,
    aggregate,
    plan_names,
)
from .volume import LabelVolume, Mask, ScalarVolume, ensure_compatible, read_volume, write_volume

FK_BUILTIN = "fk-builtin"
EXTERNAL_PREFIX = "external:"

_SUBJECT_PATH_KEYS = (
    "tissue_wm",
    "tissue_gm",
    "tissue_csf",
    "brain_mask",
    "preop_seg",
    "followup_seg",
)


@dataclass(frozen=True)
class SubjectEntry:
    """Resolved file locations for one subject."""

    id: str
    dataset: str
    tissue_wm: Path
    tissue_gm: Path
    tissue_csf: Path
    brain_mask: Path
    preop_seg: Path
    followup_seg: Path
    cellmaps: Mapping[str, Path] = field(default_factory=dict)


@dataclass(frozen=True)
class Manifest:
    name: str
    subjects: tuple
    label_remap: Optional[Mapping[int, int]] = None


def _pointer_error(pointer: str, message: str) -> ManifestError:
    return ManifestError(f"{pointer}: {message}")


def _require(obj, key, pointer, kind):
    if key not in obj:
        raise _pointer_error(f"{pointer}/{key}", "missing required field")
    value = obj[key]
    if not isinstance(value, kind):
        raise _pointer_error(
            f"{pointer}/{key}", f"expected {kind.__name__}, got {type(value).__name__}"
        )
    return value


def load_manifest(path) -> Manifest:
    """Load and validate a cohort manifest.

    Schema violations raise ManifestError carrying a JSON pointer; missing
    files are collected and reported all at once.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise _pointer_error("", "manifest root must be an object")
    version = _require(doc, "schema_version", "", int)
    if version != 1:
        raise _pointer_error("/schema_version", f"unsupported version {version}")
    name = _require(doc, "dataset", "", str)

    label_remap = None
    if "label_remap" in doc and doc["label_remap"] is not None:
        raw = doc["label_remap"]
        if not isinstance(raw, dict):
            raise _pointer_error("/label_remap", "must be an object")
        label_remap = {}
        for key, value in raw.items():
            try:
                src = int(key)
            except ValueError:
                raise _pointer_error(f"/label_remap/{key}", "key must be an integer")
            if not isinstance(value, int) or value not in (0, 1, 2, 3):
                raise _pointer_error(f"/label_remap/{key}", "value must be one of 0,1,2,3")
            label_remap[src] = value
        targets = list(label_remap.values())
        if len(set(targets)) != len(targets):
            raise _pointer_error("/label_remap", "mapping must be injective into {0,1,2,3}")

    subjects_raw = _require(doc, "subjects", "", list)
    if not subjects_raw:
        raise _pointer_error("/subjects", "at least one subject required")

    root = path.parent
    subjects = []
    seen = {}
    missing = []
    for i, raw in enumerate(subjects_raw):
        pointer = f"/subjects/{i}"
        if not isinstance(raw, dict):
            raise _pointer_error(pointer, "subject entry must be an object")
        sid = _require(raw, "id", pointer, str)
        if sid in seen:
            raise _pointer_error(
                f"{pointer}/id", f"duplicate subject id {sid!r} (first at /subjects/{seen[sid]})"
            )
        seen[sid] = i
        dataset = _require(raw, "dataset", pointer, str)
        paths = {}
        for key in _SUBJECT_PATH_KEYS:
            rel = _require(raw, key, pointer, str)
            resolved = root / rel
            if not resolved.is_file():
                missing.append(str(resolved))
            paths[key] = resolved
        cellmaps = {}
        if "cellmaps" in raw and raw["cellmaps"] is not None:
            if not isinstance(raw["cellmaps"], dict):
                raise _pointer_error(f"{pointer}/cellmaps", "must be an object")
            for model, rel in raw["cellmaps"].items():
                if not isinstance(rel, str):
                    raise _pointer_error(f"{pointer}/cellmaps/{model}", "path must be a string")
                resolved = root / rel
                if not resolved.is_file():
                    missing.append(str(resolved))
                cellmaps[model] = resolved
        subjects.append(SubjectEntry(id=sid, dataset=dataset, cellmaps=cellmaps, **paths))

    if missing:
        listing = "\n  ".join(missing)
        raise ManifestError(f"{len(missing)} referenced file(s) missing:\n  {listing}")
    return Manifest(name=name, subjects=tuple(subjects), label_remap=label_remap)


@dataclass(frozen=True)
class RunConfig:
    """Evaluation settings for a cohort run."""

    models: tuple = (FK_BUILTIN,)
    margin_mm: float = 15.0
    recurrence_defs: tuple = ALL_DEFINITIONS
    alternative: Alternative = Alternative.GREATER
    exact_cutoff: int = EXACT_CUTOFF
    parallelism: int = 1
    save_volumes: bool = False
    output_dir: Optional[Path] = None
    calibration: CalibrationConfig = CalibrationConfig()

    def __post_init__(self):
        if not self.models:
            raise ValueError("at least one model must be selected")
        for model in self.models:
            if model != FK_BUILTIN and not model.startswith(EXTERNAL_PREFIX):
                raise ValueError(
                    f"unknown model {model!r}: use {FK_BUILTIN!r} or '{EXTERNAL_PREFIX}<name>'"
                )
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


def run_config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed JSON/TOML document."""
    kwargs = {}
    if "models" in doc:
        kwargs["models"] = tuple(doc["models"])
    for key in ("margin_mm", "parallelism", "save_volumes", "exact_cutoff"):
        if key in doc:
            kwargs[key] = doc[key]
    if "alternative" in doc:
        kwargs["alternative"] = Alternative(doc["alternative"])
    if "recurrence_defs" in doc:
        kwargs["recurrence_defs"] = tuple(
            RecurrenceDefinition(d) for d in doc["recurrence_defs"]
        )
    if "calibration" in doc:
        kwargs["calibration"] = CalibrationConfig(**doc["calibration"])
    return RunConfig(**kwargs)


@dataclass(frozen=True)
class SkipRecord:
    subject_id: str
    reason: str
    detail: str


@dataclass(frozen=True)
class CohortResults:
    cohort: str
    metrics: tuple
    skips: tuple
    rows: tuple
    alternative: Alternative
    exact_cutoff: int
    definitions: tuple = ALL_DEFINITIONS


def _model_label(model: str) -> str:
    return model[len(EXTERNAL_PREFIX):] if model.startswith(EXTERNAL_PREFIX) else model


def _load_subject_volumes(entry: SubjectEntry, remap):
    tissue = TissueMaps(
        read_volume(entry.tissue_wm),
        read_volume(entry.tissue_gm),
        read_volume(entry.tissue_csf),
    )
    brain = read_volume(entry.brain_mask, as_mask=True)
    preop = read_volume(entry.preop_seg, label_remap=remap)
    followup = read_volume(entry.followup_seg, label_remap=remap)
    if not isinstance(preop, LabelVolume) or not isinstance(followup, LabelVolume):
        raise ManifestError(f"{entry.id}: segmentations must be integer label volumes")
    return tissue, brain, preop, followup


def run_subject(entry: SubjectEntry, manifest: Manifest, config: RunConfig):
    """Evaluate one subject; returns SubjectMetrics or a SkipRecord."""
    try:
        try:
            tissue, brain, preop, followup = _load_subject_volumes(entry, manifest.label_remap)
        except (OSError, GbmBenchError, ValueError) as exc:
            return SkipRecord(entry.id, "load-error", str(exc))

        try:
            ensure_compatible(tissue.meta, brain.meta, preop.meta, followup.meta)
        except GridCompatibilityError as exc:
            return SkipRecord(entry.id, "grid-mismatch", str(exc))

        core = preop.label_mask((1, 3))
        if core.voxel_count == 0:
            return SkipRecord(entry.id, "empty-preop-core", "preop has no necrosis/enhancing voxels")
        if followup.label_mask((3,)).voxel_count == 0:
            return SkipRecord(entry.id, "no-enhancing-recurrence", "followup has no label-3 voxels")

        cellmaps = {}
        for model in config.models:
            label = _model_label(model)
            if model == FK_BUILTIN:
                try:
                    cellmap, _ = predict_cellmap(preop, tissue, config.calibration)
                except GbmBenchError as exc:
                    return SkipRecord(entry.id, "calibration-error", str(exc))
            else:
                if label not in entry.cellmaps:
                    return SkipRecord(entry.id, "cellmap-missing", f"no cell map for model {label!r}")
                try:
                    vol = read_volume(entry.cellmaps[label])
                except (OSError, GbmBenchError) as exc:
                    return SkipRecord(entry.id, "load-error", str(exc))
                if not isinstance(vol, ScalarVolume):
                    return SkipRecord(entry.id, "cellmap-range-violation",
                                      f"{label}: cell map must be a float volume")
                try:
                    ensure_compatible(vol.meta, brain.meta)
                except GridCompatibilityError as exc:
                    return SkipRecord(entry.id, "grid-mismatch", str(exc))
                try:
                    cellmap = CellMap(vol)
                except ValueError as exc:
                    return SkipRecord(entry.id, "cellmap-range-violation", f"{label}: {exc}")
            cellmaps[label] = cellmap

        standard = standard_plan(core, brain, config.margin_mm)
        plans = {STANDARD_PLAN_NAME: standard}
        for label, cellmap in cellmaps.items():
            try:
                plans[label] = model_plan(cellmap, brain, standard.voxel_count)
            except GbmBenchError as exc:
                return SkipRecord(entry.id, "degenerate-cellmap", f"{label}: {exc}")

        result = subject_metrics(entry.id, entry.dataset, preop, followup, plans)

        if config.save_volumes and config.output_dir is not None:
            sdir = Path(config.output_dir) / "subjects" / entry.id
            sdir.mkdir(parents=True, exist_ok=True)
            for label, plan in plans.items():
                save_plan(plan, sdir / f"plan_{label}")
            for label, cellmap in cellmaps.items():
                write_volume(
                    ScalarVolume(cellmap.meta, cellmap.data.astype(np.float32)),
                    sdir / f"cellmap_{label}.nii.gz",
                )
        return result
    except Exception as exc:  # crash isolation: one bad subject never aborts the cohort
        return SkipRecord(entry.id, "error", f"{type(exc).__name__}: {exc}")


def run_cohort(manifest: Manifest, config: RunConfig) -> CohortResults:
    """Evaluate every subject with bounded parallelism and aggregate.

    Output is a pure function of the inputs: results are sorted by subject
    id before aggregation, so parallelism width never changes reports.
    """
    if config.parallelism == 1:
        outcomes = [run_subject(e, manifest, config) for e in manifest.subjects]
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            outcomes = list(pool.map(lambda e: run_subject(e, manifest, config), manifest.subjects))

    metrics = sorted(
        (o for o in outcomes if isinstance(o, SubjectMetrics)), key=lambda m: m.subject_id
    )
    skips = sorted(
        (o for o in outcomes if isinstance(o, SkipRecord)), key=lambda s: s.subject_id
    )
    if not metrics:
        raise CohortError(
            f"no subject survived evaluation ({len(skips)} skipped)"
        )
    rows = aggregate(
        metrics, manifest.name, config.alternative, config.exact_cutoff,
        config.recurrence_defs,
    )
    return CohortResults(
        cohort=manifest.name,
        metrics=tuple(metrics),
        skips=tuple(skips),
        rows=tuple(rows),
        alternative=config.alternative,
        exact_cutoff=config.exact_cutoff,
        definitions=tuple(config.recurrence_defs),
    )


# ---------------------------------------------------------------------------
# report emission


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def subject_csv_rows(results: CohortResults):
    header = [
        "subject",
        "dataset",
        "model",
        "recurrence_def",
        "coverage",
        "preop_core_cm3",
        "recurrence_enh_cm3",
        "com_distance_cm",
        "multifocal",
        "under_volumed",
    ]
    yield header
    for sm in results.metrics:
        for model in plan_names([sm]):
            for definition in results.definitions:
                yield [
                    sm.subject_id,
                    sm.dataset,
                    model,
                    definition.value,
                    _fmt(sm.coverage[(model, definition)]),
                    _fmt(sm.preop_core_cm3),
                    _fmt(sm.recurrence_enh_cm3),
                    _fmt(sm.com_distance_cm),
                    _fmt(sm.multifocal),
                    _fmt(sm.under_volumed.get(model, False)),
                ]


def aggregate_csv_rows(results: CohortResults):
    yield ["group", "model", "recurrence_def", "n", "mean", "stderr", "p_value", "method"]
    for row in results.rows:
        yield [
            row.dataset,
            row.model,
            row.recurrence_def.value,
            str(row.n),
            _fmt(row.mean),
            _fmt(row.stderr),
            _fmt(row.p_value),
            row.method.value if row.method else "",
        ]


def render_table(results: CohortResults) -> str:
    """Human-readable cohort table: one block per recurrence definition,
    rows per dataset plus the combined cohort, 'mean +/- stderr' cells with
    a '*' marker when p < 0.05, and a closing p-value row for the cohort."""
    models = plan_names(results.metrics)
    by_key = {(r.dataset, r.model, r.recurrence_def): r for r in results.rows}
    group_order = []
    for row in results.rows:
        if row.dataset not in group_order:
            group_order.append(row.dataset)

    lines = []
    titles = {
        RecurrenceDefinition.ENHANCING: "Enhancing recurrence",
        RecurrenceDefinition.CORE: "Recurrence core (necrosis + enhancing)",
        RecurrenceDefinition.FULL: "Full recurrence (necrosis + enhancing + edema)",
    }
    for definition in results.definitions:
        grid = [["Dataset"] + models]
        for group in group_order:
            cells = [group]
            for model in models:
                row = by_key[(group, model, definition)]
                cell = f"{row.mean:.2f} ± {row.stderr:.2f}"
                if row.p_value is not None and row.p_value < 0.05:
                    cell += "*"
                cells.append(cell)
            grid.append(cells)
        p_cells = [f"p ({results.cohort})"]
        for model in models:
            row = by_key[(results.cohort, model, definition)]
            p_cells.append("-" if row.p_value is None else f"{row.p_value:.2g}")
        grid.append(p_cells)

        widths = [max(len(r[c]) for r in grid) for c in range(len(grid[0]))]
        lines.append(f"== Coverage: {titles[definition]} ==")
        for i, cells in enumerate(grid):
            lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
            if i == 0:
                lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
        lines.append("")
    return "\n".join(lines)


def exploration_csv_rows(results: CohortResults):
    yield ["group", "n", "median_preop_core_cm3", "median_recurrence_enh_cm3",
           "median_com_distance_cm"]
    datasets = sorted({sm.dataset for sm in results.metrics})
    groups = [(d, [sm for sm in results.metrics if sm.dataset == d]) for d in datasets]
    if datasets != [results.cohort]:
        groups.append((results.cohort, list(results.metrics)))
    for name, members in groups:
        yield [
            name,
            str(len(members)),
            _fmt(float(np.median([sm.preop_core_cm3 for sm in members]))),
            _fmt(float(np.median([sm.recurrence_enh_cm3 for sm in members]))),
            _fmt(float(np.median([sm.com_distance_cm for sm in members]))),
        ]


def results_to_json(results: CohortResults) -> dict:
    return {
        "schema_version": 1,
        "cohort": results.cohort,
        "alternative": results.alternative.value,
        "exact_cutoff": results.exact_cutoff,
        "definitions": [d.value for d in results.definitions],
        "metrics": [
            {
                "subject": sm.subject_id,
                "dataset": sm.dataset,
                "coverage": {
                    model: {
                        definition.value: sm.coverage[(model, definition)]
                        for definition in results.definitions
                    }
                    for model in plan_names([sm])
                },
                "preop_core_cm3": sm.preop_core_cm3,
                "recurrence_enh_cm3": sm.recurrence_enh_cm3,
                "com_distance_cm": sm.com_distance_cm,
                "multifocal": sm.multifocal,
                "under_volumed": dict(sm.under_volumed),
            }
            for sm in results.metrics
        ],
        "skips": [
            {"subject": s.subject_id, "reason": s.reason, "detail": s.detail}
            for s in results.skips
        ],
    }


def results_from_json(doc: dict) -> CohortResults:
    metrics = []
    for item in doc["metrics"]:
        cov = {}
        under = {}
        for model, per_def in item["coverage"].items():
            for def_value, value in per_def.items():
                cov[(model, RecurrenceDefinition(def_value))] = value
            under[model] = item["under_volumed"].get(model, False)
        metrics.append(
            SubjectMetrics(
                subject_id=item["subject"],
                dataset=item["dataset"],
                coverage=cov,
                preop_core_cm3=item["preop_core_cm3"],
                recurrence_enh_cm3=item["recurrence_enh_cm3"],
                com_distance_cm=item["com_distance_cm"],
                multifocal=item["multifocal"],
                under_volumed=under,
            )
        )
    alternative = Alternative(doc["alternative"])
    cutoff = doc["exact_cutoff"]
    definitions = tuple(RecurrenceDefinition(d) for d in doc["definitions"])
    rows = aggregate(metrics, doc["cohort"], alternative, cutoff, definitions)
    skips = tuple(
        SkipRecord(s["subject"], s["reason"], s["detail"]) for s in doc["skips"]
    )
    return CohortResults(
        cohort=doc["cohort"],
        metrics=tuple(metrics),
        skips=skips,
        rows=tuple(rows),
        alternative=alternative,
        exact_cutoff=cutoff,
        definitions=definitions,
    )


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in rows:
            writer.writerow(row)


def emit_report(results: CohortResults, out_dir) -> dict:
    """Write the report file set; returns {name: path}.

    Validates before writing anything: results must contain scored
    subjects and at least one model plan beside the standard one.
    """
    if not results.metrics:
        raise ValueError("cannot report an empty cohort")
    models = [m for m in plan_names(results.metrics) if m != STANDARD_PLAN_NAME]
    if not models:
        raise ValueError("cannot report without at least one model plan")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "subjects": out_dir / "subjects.csv",
        "aggregate": out_dir / "aggregate.csv",
        "table": out_dir / "table.txt",
        "exploration": out_dir / "exploration.csv",
        "skips": out_dir / "skips.csv",
        "results": out_dir / "cohort_results.json",
    }
    _write_csv(paths["subjects"], subject_csv_rows(results))
    _write_csv(paths["aggregate"], aggregate_csv_rows(results))
    with open(paths["table"], "w") as fh:
        fh.write(render_table(results))
        fh.write("\n")
    _write_csv(paths["exploration"], exploration_csv_rows(results))
    _write_csv(
        paths["skips"],
        [["subject", "reason", "detail"]]
        + [[s.subject_id, s.reason, s.detail] for s in results.skips],
    )
    with open(paths["results"], "w") as fh:
        json.dump(results_to_json(results), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
