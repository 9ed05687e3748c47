"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 cohort-level
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import CohortError, GbmBenchError, ManifestError
from .growth_fk import (
    CalibrationConfig,
    CellMap,
    GrowthParams,
    TissueMaps,
    build_diffusion_field,
    predict_cellmap,
    seed_initial_condition,
    simulate_fk,
)
from .harness import (
    EXTERNAL_PREFIX,
    FK_BUILTIN,
    Manifest,
    RunConfig,
    SubjectEntry,
    emit_report,
    load_manifest,
    render_table,
    results_from_json,
    run_cohort,
    run_config_from_dict,
)
from .morphology import WorldPoint
from .phantom import PhantomConfig, generate_cohort
from .plans import model_plan, save_plan, standard_plan
from .volume import LabelVolume, ScalarVolume, read_volume, write_volume

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_COHORT = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config_file(path: Path) -> dict:
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def _find_subject(manifest: Manifest, subject_id: str) -> SubjectEntry:
    for entry in manifest.subjects:
        if entry.id == subject_id:
            return entry
    raise ManifestError(f"subject {subject_id!r} not found in manifest")


def _load_tissue(entry: SubjectEntry) -> TissueMaps:
    return TissueMaps(
        read_volume(entry.tissue_wm),
        read_volume(entry.tissue_gm),
        read_volume(entry.tissue_csf),
    )


def _cmd_phantom(args) -> int:
    config = PhantomConfig(**_load_config_file(Path(args.config))) if args.config else PhantomConfig()
    manifest_path = generate_cohort(config, args.n, Path(args.out))
    print(manifest_path)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    manifest = load_manifest(args.manifest)
    entry = _find_subject(manifest, args.subject)
    tissue = _load_tissue(entry)
    preop = read_volume(entry.preop_seg, label_remap=manifest.label_remap)
    if not isinstance(preop, LabelVolume):
        raise ManifestError(f"{entry.id}: preop segmentation is not a label volume")
    if args.params == "calibrate":
        cellmap, result = predict_cellmap(preop, tissue)
        print(
            f"calibrated d_w={result.params.d_w:.6g} rho={result.params.rho:.6g} "
            f"objective={result.objective:.6g}"
        )
    else:
        doc = _load_config_file(Path(args.params))
        params = GrowthParams(
            d_w=doc["d_w"],
            rho=doc["rho"],
            t_end=doc["t_end"],
            seed=WorldPoint(*doc["seed"]),
            gm_ratio=doc.get("gm_ratio", 0.1),
        )
        diffusion = build_diffusion_field(tissue, params)
        domain = diffusion.data > 0
        init = seed_initial_condition(
            params.seed, tissue.meta, doc.get("seed_width_mm", 1.5)
        )
        init = CellMap(ScalarVolume(tissue.meta, np.where(domain, init.data, 0.0)))
        cellmap = simulate_fk(init, diffusion, params.rho, params.t_end)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(ScalarVolume(cellmap.meta, cellmap.data.astype(np.float32)), out)
    print(out)
    return EXIT_OK


def _cmd_plan(args) -> int:
    manifest = load_manifest(args.manifest)
    entry = _find_subject(manifest, args.subject)
    brain = read_volume(entry.brain_mask, as_mask=True)
    preop = read_volume(entry.preop_seg, label_remap=manifest.label_remap)
    core = preop.label_mask((1, 3))
    standard = standard_plan(core, brain, args.margin)

    if args.model == FK_BUILTIN:
        cellmap, _ = predict_cellmap(preop, _load_tissue(entry))
        label = FK_BUILTIN
    else:
        label = args.model[len(EXTERNAL_PREFIX):] if args.model.startswith(EXTERNAL_PREFIX) else args.model
        if label not in entry.cellmaps:
            raise ManifestError(f"{entry.id}: no cell map for model {label!r}")
        cellmap = CellMap(read_volume(entry.cellmaps[label]))
    model = model_plan(cellmap, brain, standard.voxel_count)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_plan(standard, out / "plan_standard")
    save_plan(model, out / f"plan_{label}")
    print(out)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.config:
        config = run_config_from_dict(_load_config_file(Path(args.config)))
    else:
        config = RunConfig()
    out_dir = Path(args.out)
    config = RunConfig(
        models=config.models,
        margin_mm=config.margin_mm,
        recurrence_defs=config.recurrence_defs,
        alternative=config.alternative,
        exact_cutoff=config.exact_cutoff,
        parallelism=config.parallelism,
        save_volumes=config.save_volumes,
        output_dir=out_dir,
        calibration=config.calibration,
    )
    results = run_cohort(manifest, config)
    paths = emit_report(results, out_dir)
    print(paths["table"])
    return EXIT_OK


def _cmd_report(args) -> int:
    results_path = Path(args.results) / "cohort_results.json"
    if not results_path.is_file():
        raise ManifestError(f"no cohort_results.json under {args.results}")
    with open(results_path) as fh:
        results = results_from_json(json.load(fh))
    if args.format == "table":
        print(render_table(results))
    else:
        from .harness import aggregate_csv_rows

        for row in aggregate_csv_rows(results):
            print(",".join(row))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="gbmbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    p.add_argument("--config", help="phantom config file (json or toml)")
    p.add_argument("--n", type=int, required=True, help="number of subjects")
    p.add_argument("--out", required=True, help="output cohort directory")
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("simulate", help="run the growth model for one subject")
    p.add_argument("--manifest", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--params", required=True,
                   help="growth parameter file (json/toml) or the word 'calibrate'")
    p.add_argument("--out", required=True, help="output cell-map path (.nii.gz)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("plan", help="build the plan pair for one subject")
    p.add_argument("--manifest", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--model", required=True,
                   help=f"{FK_BUILTIN!r} or an external cell-map model name")
    p.add_argument("--margin", type=float, default=15.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("evaluate", help="run the full pipeline over a cohort")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="run config file (json or toml)")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="re-render reports from an evaluate run")
    p.add_argument("--results", required=True, help="directory written by evaluate")
    p.add_argument("--format", choices=("csv", "table"), default="table")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CohortError as exc:
        print(f"cohort failure: {exc}", file=sys.stderr)
        return EXIT_COHORT
    except (ManifestError, GbmBenchError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
