"""Reference tumor growth model: Fisher-Kolmogorov reaction-diffusion.

The dynamics are dc/dt = div(D grad c) + rho * c * (1 - c) on a voxel grid
with tissue-dependent diffusivity D. Each step applies an explicit
conservative-flux diffusion update followed by the closed-form logistic
update for the reaction term, so pure proliferation is integrated exactly
and pure diffusion conserves mass to rounding.

Zero-diffusivity tissue (CSF, outside the brain) acts as a flux barrier:
face diffusivities are harmonic means, which vanish whenever either side
is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDynamicsError, EmptyRegionError, NumericalInstabilityError
from .morphology import WorldPoint, center_of_mass, volume_cm3
from .volume import (
    GridMeta,
    LabelVolume,
    Mask,
    ScalarVolume,
    ensure_compatible,
    LABEL_NECROSIS,
    LABEL_EDEMA,
    LABEL_ENHANCING,
)

DT_SAFETY = 0.9
SEED_CLIP = 1e-6
CSF_BLOCK_THRESHOLD = 0.5


@dataclass(frozen=True)
class GrowthParams:
    """Fisher-Kolmogorov parameters.

    d_w: white-matter diffusivity (mm^2/day); rho: proliferation rate
    (1/day); t_end: horizon (days); seed: initial tumor location (mm);
    gm_ratio: gray-to-white diffusivity ratio.
    """

    d_w: float
    rho: float
    t_end: float
    seed: WorldPoint
    gm_ratio: float = 0.1

    def __post_init__(self):
        if self.d_w < 0:
            raise ValueError(f"d_w must be >= 0, got {self.d_w}")
        if self.rho < 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if not self.t_end > 0:
            raise ValueError(f"t_end must be > 0, got {self.t_end}")
        if not 0 <= self.gm_ratio <= 1:
            raise ValueError(f"gm_ratio must be in [0, 1], got {self.gm_ratio}")


@dataclass(frozen=True)
class TissueMaps:
    """White-matter / gray-matter / CSF probability maps on one grid."""

    p_wm: ScalarVolume
    p_gm: ScalarVolume
    p_csf: ScalarVolume

    def __post_init__(self):
        ensure_compatible(self.p_wm.meta, self.p_gm.meta, self.p_csf.meta)
        total = np.zeros(self.meta.shape, dtype=np.float64)
        for name in ("p_wm", "p_gm", "p_csf"):
            vol = getattr(self, name)
            if vol.data.min() < 0 or vol.data.max() > 1:
                raise ValueError(f"{name} values must lie in [0, 1]")
            total += vol.data
        if total.max() > 1 + 1e-6:
            raise ValueError(f"tissue probabilities sum to {total.max()} > 1 at some voxel")

    @property
    def meta(self) -> GridMeta:
        return self.p_wm.meta


@dataclass(frozen=True)
class CellMap:
    """Tumor cell concentration in [0, 1]."""

    c: ScalarVolume

    def __post_init__(self):
        data = self.c.data
        if data.min() < 0 or data.max() > 1:
            raise ValueError(
                f"cell density must lie in [0, 1], got range "
                f"[{data.min()}, {data.max()}]"
            )

    @property
    def meta(self) -> GridMeta:
        return self.c.meta

    @property
    def data(self) -> np.ndarray:
        return self.c.data


def build_diffusion_field(tissue: TissueMaps, params: GrowthParams) -> ScalarVolume:
    """Voxelwise diffusivity D = d_w * (p_wm + gm_ratio * p_gm).

    Zero where CSF dominates (p_csf > 0.5) and outside the brain domain
    (all probabilities zero).
    """
    d = params.d_w * (tissue.p_wm.data + params.gm_ratio * tissue.p_gm.data)
    d = d.astype(np.float64)
    d[tissue.p_csf.data > CSF_BLOCK_THRESHOLD] = 0.0
    outside = (tissue.p_wm.data + tissue.p_gm.data + tissue.p_csf.data) == 0
    d[outside] = 0.0
    return ScalarVolume(tissue.meta, d)


def seed_initial_condition(seed: WorldPoint, meta: GridMeta, width_mm: float) -> CellMap:
    """Isotropic Gaussian bump centered on ``seed``, clipped below 1e-6."""
    if not width_mm > 0:
        raise ValueError(f"seed width must be > 0, got {width_mm}")
    lo = meta.origin
    hi = tuple(o + (n - 1) * s for o, s, n in zip(meta.origin, meta.spacing, meta.shape))
    pt = (seed.x, seed.y, seed.z)
    if any(p < l or p > h for p, l, h in zip(pt, lo, hi)):
        raise ValueError(f"seed {pt} outside grid bounds {lo}..{hi}")
    r2 = (
        ((meta.axis_coords(0) - seed.x) ** 2)[:, None, None]
        + ((meta.axis_coords(1) - seed.y) ** 2)[None, :, None]
        + ((meta.axis_coords(2) - seed.z) ** 2)[None, None, :]
    )
    c = np.exp(-r2 / (2.0 * width_mm**2))
    c[c < SEED_CLIP] = 0.0
    return CellMap(ScalarVolume(meta, c))


def stable_dt(diffusion: ScalarVolume, rho: float) -> float:
    """Largest safe explicit step: 0.9 * min(diffusion bound, 1/(4 rho)).

    The diffusion bound is 1 / (2 * D_max * (1/sx^2 + 1/sy^2 + 1/sz^2)).
    Raises DegenerateDynamicsError when both D_max and rho are zero.
    """
    d_max = float(diffusion.data.max())
    if not np.isfinite(d_max) or d_max < 0:
        raise ValueError(f"diffusivity must be finite and >= 0, got max {d_max}")
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    bounds = []
    if d_max > 0:
        inv2 = sum(1.0 / s**2 for s in diffusion.meta.spacing)
        bounds.append(1.0 / (2.0 * d_max * inv2))
    if rho > 0:
        bounds.append(1.0 / (4.0 * rho))
    if not bounds:
        raise DegenerateDynamicsError("both diffusion and proliferation are zero")
    return DT_SAFETY * min(bounds)


def _face_coefficients(d: np.ndarray, spacing) -> tuple:
    """Harmonic-mean face diffusivities divided by spacing^2, per axis.

    A zero on either side of a face zeroes the face (insulating boundary).
    """
    faces = []
    for axis in range(3):
        a = np.moveaxis(d, axis, 0)[:-1]
        b = np.moveaxis(d, axis, 0)[1:]
        s = a + b
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where(s > 0, 2.0 * a * b / np.where(s > 0, s, 1.0), 0.0)
        faces.append(np.moveaxis(h, 0, axis) / spacing[axis] ** 2)
    return tuple(faces)


def _evolve(c: np.ndarray, faces: tuple, rho: float, dts) -> np.ndarray:
    """Advance ``c`` in place through the step schedule ``dts``."""
    div = np.empty_like(c)
    slabs = [
        ((slice(None, -1), slice(None), slice(None)), (slice(1, None), slice(None), slice(None))),
        ((slice(None), slice(None, -1), slice(None)), (slice(None), slice(1, None), slice(None))),
        ((slice(None), slice(None), slice(None, -1)), (slice(None), slice(None), slice(1, None))),
    ]
    for step, dt in enumerate(dts):
        div.fill(0.0)
        for axis in range(3):
            lo, hi = slabs[axis]
            g = faces[axis] * (c[hi] - c[lo])
            div[lo] += g
            div[hi] -= g
        c += dt * div
        if rho > 0:
            growth = math.exp(rho * dt)
            denom = c * (growth - 1.0)
            denom += 1.0
            c *= growth
            c /= denom
        if not math.isfinite(float(c.sum())):
            raise NumericalInstabilityError(step)
        np.clip(c, 0.0, 1.0, out=c)
    return c


def _step_schedule(t_end: float, dt: float):
    n = max(1, math.ceil(t_end / dt))
    last = t_end - (n - 1) * dt
    if last <= 0 and n > 1:  # guard against float overshoot in ceil
        n -= 1
        last = t_end - (n - 1) * dt
    return [dt] * (n - 1) + [last]


def simulate_fk(init: CellMap, diffusion: ScalarVolume, rho: float, t_end: float) -> CellMap:
    """Integrate the growth equation from ``init`` for ``t_end`` days.

    Steps are sized by :func:`stable_dt`, with a final partial step landing
    exactly on ``t_end``. The output is clamped to [0, 1].
    """
    ensure_compatible(init.meta, diffusion.meta)
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    if not t_end > 0:
        raise ValueError(f"t_end must be > 0, got {t_end}")
    d = diffusion.data
    if not np.isfinite(d).all() or d.min() < 0:
        raise ValueError("diffusivity must be finite and >= 0 everywhere")
    dt = stable_dt(diffusion, rho)
    faces = _face_coefficients(np.asarray(d, dtype=np.float64), diffusion.meta.spacing)
    c = init.data.astype(np.float64, copy=True)
    _evolve(c, faces, rho, _step_schedule(t_end, dt))
    return CellMap(ScalarVolume(init.meta, c))


@dataclass(frozen=True)
class CalibrationConfig:
    """Settings for volume-matching parameter calibration."""

    t_end: float = 100.0
    theta_core: float = 0.8
    theta_edema: float = 0.16
    d_w_bounds: tuple = (0.02, 2.0)
    rho_bounds: tuple = (0.002, 0.2)
    grid_size: tuple = (8, 8)
    refine_passes: int = 1
    seed_width_mm: float = 1.5
    gm_ratio: float = 0.1

    def __post_init__(self):
        if not 0 < self.theta_edema < self.theta_core < 1:
            raise ValueError("need 0 < theta_edema < theta_core < 1")
        for name in ("d_w_bounds", "rho_bounds"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ValueError(f"{name} must satisfy 0 < lo < hi")


@dataclass(frozen=True)
class CalibrationResult:
    params: GrowthParams
    objective: float
    evaluations: int


class _VolumeObjective:
    """J(d_w, rho) comparing simulated to segmented compartment volumes."""

    def __init__(self, tissue: TissueMaps, seed: WorldPoint, v_core: float,
                 v_outline: float, config: CalibrationConfig):
        self.config = config
        self.meta = tissue.meta
        self.v_core = v_core
        self.v_outline = v_outline
        unit = build_diffusion_field(
            tissue, GrowthParams(1.0, 0.0, config.t_end, seed, config.gm_ratio)
        )
        self.unit_d = unit.data
        self.unit_dmax = float(self.unit_d.max())
        domain = self.unit_d > 0
        seed = _snap_to_domain(seed, domain, self.meta)
        init = seed_initial_condition(seed, self.meta, config.seed_width_mm)
        self.c0 = np.where(domain, init.data, 0.0)
        # harmonic means scale linearly with d_w, so faces are built once
        self.unit_faces = _face_coefficients(
            np.asarray(self.unit_d, dtype=np.float64), self.meta.spacing
        )
        self.inv2 = sum(1.0 / s**2 for s in self.meta.spacing)
        self.cache = {}

    def __call__(self, d_w: float, rho: float) -> float:
        key = (d_w, rho)
        if key in self.cache:
            return self.cache[key]
        bounds = []
        if d_w * self.unit_dmax > 0:
            bounds.append(1.0 / (2.0 * d_w * self.unit_dmax * self.inv2))
        if rho > 0:
            bounds.append(1.0 / (4.0 * rho))
        dt = DT_SAFETY * min(bounds)
        faces = tuple(d_w * f for f in self.unit_faces)
        c = self.c0.copy()
        _evolve(c, faces, rho, _step_schedule(self.config.t_end, dt))
        voxvol = self.meta.voxel_volume_mm3 / 1000.0
        v_sim_core = np.count_nonzero(c >= self.config.theta_core) * voxvol
        v_sim_edema = np.count_nonzero(c >= self.config.theta_edema) * voxvol
        j = (v_sim_core / self.v_core - 1.0) ** 2 + (v_sim_edema / self.v_outline - 1.0) ** 2
        self.cache[key] = j
        return j


def _snap_to_domain(seed: WorldPoint, domain: np.ndarray, meta: GridMeta) -> WorldPoint:
    """Move the seed to the nearest positive-diffusivity voxel center if it
    fell outside (e.g. a core center of mass inside a ventricle)."""
    idx = tuple(
        int(np.clip(round((p - o) / s), 0, n - 1))
        for p, o, s, n in zip((seed.x, seed.y, seed.z), meta.origin, meta.spacing, meta.shape)
    )
    if domain[idx]:
        return seed
    cand = np.argwhere(domain)
    if cand.size == 0:
        raise EmptyRegionError("diffusion domain is empty; cannot place seed")
    world = cand * np.asarray(meta.spacing) + np.asarray(meta.origin)
    d2 = ((world - seed.as_array()) ** 2).sum(axis=1)
    best = cand[int(np.argmin(d2))]
    return WorldPoint(*(o + i * s for i, o, s in zip(best, meta.origin, meta.spacing)))


def _log_grid(bounds, count):
    return np.geomspace(bounds[0], bounds[1], count)


def calibrate_fk(
    preop: LabelVolume,
    tissue: TissueMaps,
    config: CalibrationConfig = CalibrationConfig(),
) -> CalibrationResult:
    """Fit (d_w, rho) so simulated compartment volumes match the
    preoperative segmentation.

    The seed is fixed at the core center of mass and the horizon at
    config.t_end. Candidates come from a log-spaced grid searched by
    coordinate descent, then refined locally at half the grid pitch;
    ties prefer the lexicographically smaller (d_w, rho).
    """
    ensure_compatible(preop.meta, tissue.meta)
    core = preop.label_mask((LABEL_NECROSIS, LABEL_ENHANCING))
    if core.voxel_count == 0:
        raise EmptyRegionError("preoperative core (necrosis + enhancing) is empty")
    outline = preop.label_mask((LABEL_NECROSIS, LABEL_EDEMA, LABEL_ENHANCING))
    seed = center_of_mass(core)
    objective = _VolumeObjective(
        tissue, seed, volume_cm3(core), volume_cm3(outline), config
    )

    d_grid = _log_grid(config.d_w_bounds, config.grid_size[0])
    r_grid = _log_grid(config.rho_bounds, config.grid_size[1])

    def better(a, b):
        # (J, d_w, rho) lexicographic: equal J resolves to smaller params
        return a < b

    # Coordinate descent over the grid: alternate full sweeps of each axis.
    di, ri = len(d_grid) // 2, len(r_grid) // 2
    for _ in range(10):
        moved = False
        best = (objective(d_grid[di], r_grid[ri]), d_grid[di], r_grid[ri])
        for i, d_w in enumerate(d_grid):
            cand = (objective(d_w, r_grid[ri]), d_w, r_grid[ri])
            if better(cand, best):
                best, di, moved = cand, i, True
        for j, rho in enumerate(r_grid):
            cand = (objective(d_grid[di], rho), d_grid[di], rho)
            if better(cand, best):
                best, ri, moved = cand, j, True
        if not moved:
            break

    # Local refinement at successively halved pitch (log-space), clamped
    # to the search bounds.
    pitch_d = math.log(d_grid[1] / d_grid[0]) if len(d_grid) > 1 else 0.0
    pitch_r = math.log(r_grid[1] / r_grid[0]) if len(r_grid) > 1 else 0.0
    best_j, best_d, best_r = best
    for level in range(1, config.refine_passes + 1):
        hd = pitch_d / (2.0**level)
        hr = pitch_r / (2.0**level)
        if hd == 0 and hr == 0:
            break
        for _ in range(10):
            moved = False
            for od, orr in ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)):
                d_w = math.exp(min(max(math.log(best_d) + od * hd,
                                       math.log(config.d_w_bounds[0])),
                                   math.log(config.d_w_bounds[1])))
                rho = math.exp(min(max(math.log(best_r) + orr * hr,
                                       math.log(config.rho_bounds[0])),
                                   math.log(config.rho_bounds[1])))
                cand = (objective(d_w, rho), d_w, rho)
                if better(cand, (best_j, best_d, best_r)):
                    best_j, best_d, best_r = cand
                    moved = True
            if not moved:
                break

    params = GrowthParams(best_d, best_r, config.t_end, seed, config.gm_ratio)
    return CalibrationResult(params, best_j, len(objective.cache))


def predict_cellmap(
    preop: LabelVolume,
    tissue: TissueMaps,
    config: CalibrationConfig = CalibrationConfig(),
) -> tuple:
    """Calibrate on the preop segmentation and simulate the fitted model.

    Returns (CellMap, CalibrationResult).
    """
    result = calibrate_fk(preop, tissue, config)
    params = result.params
    diffusion = build_diffusion_field(tissue, params)
    domain = diffusion.data > 0
    seed = _snap_to_domain(params.seed, domain, tissue.meta)
    init = seed_initial_condition(seed, tissue.meta, config.seed_width_mm)
    init = CellMap(ScalarVolume(tissue.meta, np.where(domain, init.data, 0.0)))
    cellmap = simulate_fk(init, diffusion, params.rho, params.t_end)
    return cellmap, result
