"""Synthetic cohort generator.

Each subject is an ellipsoidal brain (white-matter interior, cortical
gray-matter shell, CSF ventricles) with a tumor grown by the built-in
model from a random white-matter seed. The preoperative segmentation
thresholds the cell field at t1; the follow-up continues the simulation
to t2 after zeroing the enhancing region (a crude resection surrogate)
and thresholds again. Everything is a deterministic function of
(config.seed, subject index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PhantomGenerationError
from .growth_fk import (
    CellMap,
    GrowthParams,
    TissueMaps,
    build_diffusion_field,
    seed_initial_condition,
    simulate_fk,
)
from .morphology import WorldPoint, center_of_mass
from .volume import (
    GridMeta,
    LabelVolume,
    LABEL_EDEMA,
    LABEL_ENHANCING,
    LABEL_NECROSIS,
    Mask,
    ScalarVolume,
    write_volume,
)

GRAY_SHELL_FRACTION = 0.15
NECROSIS_RADIUS_FRACTION = 0.3
MAX_DRAW_ATTEMPTS = 10
MIN_FOLLOWUP_GAP_DAYS = 84.0


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry, growth-parameter ranges, and horizons for generation."""

    shape: tuple = (64, 64, 64)
    spacing: tuple = (2.0, 2.0, 2.0)
    brain_semi_axes: tuple = (55.0, 45.0, 40.0)
    ventricle_semi_axes: tuple = (8.0, 18.0, 10.0)
    d_w_range: tuple = (0.1, 0.5)
    rho_range: tuple = (0.02, 0.1)
    t1: float = 100.0
    t2: float = 200.0
    theta_enh: float = 0.8
    theta_edema: float = 0.16
    seed: int = 0
    seed_width_mm: float = 1.5
    gm_ratio: float = 0.1
    resection: bool = True
    dataset: str = "PHANTOM"

    def __post_init__(self):
        if self.t2 - self.t1 < MIN_FOLLOWUP_GAP_DAYS:
            raise ValueError(
                f"t2 - t1 must be >= {MIN_FOLLOWUP_GAP_DAYS} days, got {self.t2 - self.t1}"
            )
        if not 0 < self.theta_edema < self.theta_enh < 1:
            raise ValueError("need 0 < theta_edema < theta_enh < 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def meta(self) -> GridMeta:
        return GridMeta(self.shape, self.spacing)


@dataclass(frozen=True)
class PhantomSubject:
    subject_id: str
    tissue: TissueMaps
    preop: LabelVolume
    followup: LabelVolume
    truth_cellmap: CellMap
    truth_params: GrowthParams


def subject_id_for(index: int) -> str:
    return f"PHANTOM-{index + 1:04d}"


def _ellipsoid_norm2(meta: GridMeta, center, semi_axes) -> np.ndarray:
    """Squared normalized ellipsoid coordinate: <= 1 inside."""
    terms = []
    for axis in range(3):
        t = (meta.axis_coords(axis) - center[axis]) / semi_axes[axis]
        shape = [1, 1, 1]
        shape[axis] = -1
        terms.append((t**2).reshape(shape))
    return terms[0] + terms[1] + terms[2]


def build_tissue(config: PhantomConfig) -> TissueMaps:
    """One-hot tissue probabilities on an ellipsoidal brain."""
    meta = config.meta
    center = [o + (n - 1) * s / 2.0 for o, s, n in zip(meta.origin, meta.spacing, meta.shape)]
    u = np.sqrt(_ellipsoid_norm2(meta, center, config.brain_semi_axes))
    brain = u <= 1.0
    gray = brain & (u > 1.0 - GRAY_SHELL_FRACTION)

    csf = np.zeros(meta.shape, dtype=bool)
    for side in (-1.0, 1.0):
        vcenter = (center[0] + side * 14.0, center[1], center[2])
        v2 = _ellipsoid_norm2(meta, vcenter, config.ventricle_semi_axes)
        csf |= brain & (v2 <= 1.0)
    csf &= ~gray
    white = brain & ~gray & ~csf

    def as_prob(mask):
        return ScalarVolume(meta, mask.astype(np.float32))

    return TissueMaps(as_prob(white), as_prob(gray), as_prob(csf))


def brain_mask(tissue: TissueMaps) -> Mask:
    total = tissue.p_wm.data + tissue.p_gm.data + tissue.p_csf.data
    return Mask(tissue.meta, total > 0)


def _labels_from_field(c: np.ndarray, meta: GridMeta, theta_enh: float,
                       theta_edema: float) -> LabelVolume:
    """Threshold a cell field into {background, necrosis, edema, enhancing}."""
    labels = np.zeros(meta.shape, dtype=np.uint8)
    enhancing = c >= theta_enh
    labels[(c >= theta_edema) & ~enhancing] = LABEL_EDEMA
    labels[enhancing] = LABEL_ENHANCING
    if enhancing.any():
        com = center_of_mass(Mask(meta, enhancing))
        r2 = (
            ((meta.axis_coords(0) - com.x) ** 2)[:, None, None]
            + ((meta.axis_coords(1) - com.y) ** 2)[None, :, None]
            + ((meta.axis_coords(2) - com.z) ** 2)[None, None, :]
        )
        r_max = np.sqrt(r2[enhancing].max())
        necrosis = enhancing & (np.sqrt(r2) <= NECROSIS_RADIUS_FRACTION * r_max)
        labels[necrosis] = LABEL_NECROSIS
    return LabelVolume(meta, labels)


def generate_phantom_subject(config: PhantomConfig, index: int) -> PhantomSubject:
    """Deterministically generate subject ``index`` of the cohort."""
    tissue = build_tissue(config)
    meta = tissue.meta
    wm_voxels = np.argwhere(tissue.p_wm.data > 0)
    if wm_voxels.size == 0:
        raise PhantomGenerationError("phantom anatomy has no white matter")

    for attempt in range(MAX_DRAW_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, index, attempt]))
        d_w = float(rng.uniform(*config.d_w_range))
        rho = float(rng.uniform(*config.rho_range))
        voxel = wm_voxels[int(rng.integers(len(wm_voxels)))]
        seed_point = WorldPoint(
            *(o + i * s for i, o, s in zip(voxel, meta.origin, meta.spacing))
        )
        params = GrowthParams(d_w, rho, config.t1, seed_point, config.gm_ratio)
        diffusion = build_diffusion_field(tissue, params)
        domain = diffusion.data > 0
        init = seed_initial_condition(seed_point, meta, config.seed_width_mm)
        init = CellMap(ScalarVolume(meta, np.where(domain, init.data, 0.0)))

        c1 = simulate_fk(init, diffusion, rho, config.t1)
        enhancing1 = c1.data >= config.theta_enh
        if not enhancing1.any():
            continue
        preop = _labels_from_field(c1.data, meta, config.theta_enh, config.theta_edema)

        resected = c1.data.copy()
        if config.resection:
            resected[enhancing1] = 0.0
        c2 = simulate_fk(
            CellMap(ScalarVolume(meta, resected)), diffusion, rho, config.t2 - config.t1
        )
        if not (c2.data >= config.theta_enh).any():
            continue
        followup = _labels_from_field(c2.data, meta, config.theta_enh, config.theta_edema)

        return PhantomSubject(
            subject_id=subject_id_for(index),
            tissue=tissue,
            preop=preop,
            followup=followup,
            truth_cellmap=c1,
            truth_params=params,
        )
    raise PhantomGenerationError(
        f"subject {index}: no usable parameter draw in {MAX_DRAW_ATTEMPTS} attempts"
    )


TRUTH_MODEL_NAME = "truth"

_FILES = (
    "tissue_wm",
    "tissue_gm",
    "tissue_csf",
    "brain_mask",
    "preop_seg",
    "followup_seg",
)


def generate_cohort(config: PhantomConfig, n: int, out_dir) -> Path:
    """Write an n-subject cohort in the harness layout; returns the
    manifest path."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(n):
        subject = generate_phantom_subject(config, index)
        sdir = out_dir / subject.subject_id
        sdir.mkdir(exist_ok=True)
        volumes = {
            "tissue_wm": subject.tissue.p_wm,
            "tissue_gm": subject.tissue.p_gm,
            "tissue_csf": subject.tissue.p_csf,
            "brain_mask": brain_mask(subject.tissue),
            "preop_seg": subject.preop,
            "followup_seg": subject.followup,
        }
        entry = {"id": subject.subject_id, "dataset": config.dataset}
        for key in _FILES:
            rel = f"{subject.subject_id}/{key}.nii.gz"
            write_volume(volumes[key], out_dir / rel)
            entry[key] = rel
        cellmap_rel = f"{subject.subject_id}/cellmap_{TRUTH_MODEL_NAME}.nii.gz"
        write_volume(
            ScalarVolume(subject.truth_cellmap.meta,
                         subject.truth_cellmap.data.astype(np.float32)),
            out_dir / cellmap_rel,
        )
        entry["cellmaps"] = {TRUTH_MODEL_NAME: cellmap_rel}
        entries.append(entry)

    manifest = {
        "schema_version": 1,
        "dataset": config.dataset,
        "subjects": entries,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest_path
