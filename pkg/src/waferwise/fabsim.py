"""Synthetic wafer generator for double-patterned metrology studies.

Each wafer gets one true per-die overlay fingerprint (a smooth degree-2
polynomial across the wafer, plus an optional programmed per-die offset and a
global placement bias). Overlay readings at the three process steps are that
fingerprint plus step-specific site noise; ADI and CMP readings additionally
carry sporadic gross outliers, AEI stays clean. Space CD follows the gap
ladder linearly in the overlay component orthogonal to the line direction;
capacitance follows 1/CD with a gap-dependent failure rate.

Every die derives its random streams from (seed, stream id, die index), so
generation is independent of scheduling and may run in parallel per die or
per wafer without changing a single bit of output.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import (
    CapacitanceRecord,
    CdsemRecord,
    DboStep,
    DieIndex,
    Family,
    N_OVERLAY_SITES,
    OVERLAY_SANITY_NM,
    Orientation,
    OverlayRecord,
    Recipe,
    StructureId,
    WaferDataset,
    designed_gap,
    die_grid,
    structures,
)

CD2_FLOOR_NM = 0.5

# Stream ids keep per-die RNG keys disjoint across record kinds.
_S_FIELD = 0
_S_OUTLIER_U = 1
_S_NOISE = 2
_S_CD = 3
_S_CAP = 4

_STEP_INDEX = {DboStep.ADI: 0, DboStep.AEI: 1, DboStep.CMP: 2}

# One-sided by design: a positive programmed offset narrows AB spaces (which
# subtract the overlay) and widens BA spaces, so programmed wafers drive the
# AB family toward electrical failure while BA structures stay healthy and
# cleanable.  Two-sided programming would push both families off the cliff
# and no density-based cleaning could recover either.
PROGRAMMED_LEVELS_NM = (0.0, 2.5, 5.0, 7.5)

# Metrology target template within a die (um). Corners first; 4-target dies
# drop the center point.
TARGET_TEMPLATE_UM = (
    (-3500.0, -3500.0),
    (3500.0, -3500.0),
    (-3500.0, 3500.0),
    (3500.0, 3500.0),
    (0.0, 0.0),
)
DIE_HALF_EXTENT_UM = 3500.0


@dataclass(frozen=True)
class FingerprintConfig:
    """True overlay fingerprint and reading-noise model.

    smooth_x/smooth_y are degree-2 polynomial coefficients
    (1, u, v, u^2, u*v, v^2) over die coordinates normalized to [-1, 1].
    The AEI step must be at least as quiet as ADI and CMP in both noise and
    outlier rate; that ordering is a process fact the generator guarantees by
    construction, so it is enforced here.
    """

    smooth_x: tuple[float, ...] = (0.3, 0.9, -0.6, 0.5, -0.4, 0.35)
    smooth_y: tuple[float, ...] = (-0.2, -0.7, 0.8, -0.45, 0.3, 0.5)
    m1b_bias_x_nm: float = 2.5
    m1b_bias_y_nm: float = 0.0
    programmed: bool = False
    program_layout_seed: int = 101
    programmed_levels_nm: tuple[float, ...] = PROGRAMMED_LEVELS_NM
    noise_sigma_adi_nm: float = 0.45
    noise_sigma_aei_nm: float = 0.22
    noise_sigma_cmp_nm: float = 0.55
    outlier_rate_adi: float = 0.03
    outlier_rate_aei: float = 0.002
    outlier_rate_cmp: float = 0.04
    outlier_mag_lo_nm: float = 6.0
    outlier_mag_hi_nm: float = 18.0

    def __post_init__(self) -> None:
        if len(self.smooth_x) != 6 or len(self.smooth_y) != 6:
            raise ValueError("smooth fields need 6 polynomial coefficients")
        if self.noise_sigma_aei_nm > min(self.noise_sigma_adi_nm, self.noise_sigma_cmp_nm):
            raise ValueError("AEI noise sigma must not exceed ADI or CMP")
        if self.outlier_rate_aei > min(self.outlier_rate_adi, self.outlier_rate_cmp):
            raise ValueError("AEI outlier rate must not exceed ADI or CMP")
        for name in ("adi", "aei", "cmp"):
            if getattr(self, f"noise_sigma_{name}_nm") < 0:
                raise ValueError("noise sigmas must be non-negative")
            if not 0 <= getattr(self, f"outlier_rate_{name}") <= 1:
                raise ValueError("outlier rates must be probabilities")
        if not 0 < self.outlier_mag_lo_nm <= self.outlier_mag_hi_nm:
            raise ValueError("outlier magnitude band must be positive and ordered")

    def noise_sigma(self, step: DboStep) -> float:
        return {DboStep.ADI: self.noise_sigma_adi_nm,
                DboStep.AEI: self.noise_sigma_aei_nm,
                DboStep.CMP: self.noise_sigma_cmp_nm}[step]

    def outlier_rate(self, step: DboStep) -> float:
        return {DboStep.ADI: self.outlier_rate_adi,
                DboStep.AEI: self.outlier_rate_aei,
                DboStep.CMP: self.outlier_rate_cmp}[step]


@dataclass(frozen=True)
class CapacitanceModel:
    """Capacitance response: C = k_geom / cd2, with relative noise, a
    per-instance gain trim, and gap-driven failures (mostly shorts reading
    far high, some open contacts reading far low)."""

    k_geom_ff_nm: float = 50.0
    sigma_rel: float = 0.02
    fail_rate_base: float = 0.01
    short_threshold_nm: float = 19.0
    fail_width_nm: float = 1.0
    fail_magnitude: float = 25.0
    open_fraction: float = 0.15
    open_factor: float = 0.05
    fail_jitter: float = 0.3
    instance_gain_step: float = 0.002

    def __post_init__(self) -> None:
        if self.k_geom_ff_nm <= 0:
            raise ValueError("k_geom must be positive")
        if not 0 <= self.fail_rate_base <= 1:
            raise ValueError("fail_rate_base must be a probability")
        if self.fail_width_nm <= 0:
            raise ValueError("fail_width_nm must be positive")
        if self.fail_magnitude <= 1:
            raise ValueError("fail_magnitude must exceed 1 (shorts read high)")

    def fail_rate(self, cd2_nm: float) -> float:
        """Failure probability for a given effective gap: monotone decreasing
        in cd2, saturating near 1 below the short threshold, floored at the
        base rate for wide gaps."""
        z = (self.short_threshold_nm - cd2_nm) / self.fail_width_nm
        sig = 1.0 / (1.0 + math.exp(-z))
        return self.fail_rate_base + (1.0 - self.fail_rate_base) * sig

    def nominal(self, cd2_nm: float, instance: int = 2) -> float:
        gain = 1.0 + self.instance_gain_step * (instance - 2)
        return self.k_geom_ff_nm / cd2_nm * gain


@dataclass(frozen=True)
class WaferSimConfig:
    """Everything needed to synthesize one wafer's records."""

    grid_dies: int = 149
    cap_dies: int = 127
    grid_width: int = 13
    grid_height: int = 13
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    cap_model: CapacitanceModel = field(default_factory=CapacitanceModel)
    cd_noise_sigma_nm: float = 0.28
    # Intra-die uniformity: quadratic bowl + saddle perturbation of the
    # effective overlay at a target position (nm at the die-corner extent).
    intra_bowl_x_nm: float = 1.4
    intra_cross_x_nm: float = 0.9
    intra_bowl_y_nm: float = 1.2
    intra_cross_y_nm: float = 0.8
    smooth_jitter_rel: float = 0.15
    capacitance_enabled: bool = True

    def __post_init__(self) -> None:
        if self.cap_dies > self.grid_dies:
            raise ValueError("cap_dies cannot exceed grid_dies")


@dataclass(frozen=True)
class WaferPlan:
    wafer_id: str
    recipe: Recipe
    capacitance: bool = False


@dataclass(frozen=True)
class Scenario:
    plans: tuple[WaferPlan, ...]
    sim: WaferSimConfig = field(default_factory=WaferSimConfig)
    seed: int = 0


@dataclass
class SyntheticWafer:
    """A generated dataset plus the hidden truth used by oracle checks."""

    dataset: WaferDataset
    true_overlay: dict[DieIndex, tuple[float, float]]
    injected_failures: tuple[int, ...]  # indices into dataset.capacitance


def default_scenario(seed: int = 0, sim: WaferSimConfig | None = None) -> Scenario:
    """Four-wafer reference scenario: two plain wafers, two with programmed
    per-die offsets; electrical test on one of each."""
    plans = (
        WaferPlan("D02", Recipe.NON_PROGRAMMED, capacitance=True),
        WaferPlan("D03", Recipe.NON_PROGRAMMED, capacitance=False),
        WaferPlan("D10", Recipe.PROGRAMMED, capacitance=True),
        WaferPlan("D11", Recipe.PROGRAMMED, capacitance=False),
    )
    return Scenario(plans=plans, sim=sim or WaferSimConfig(), seed=seed)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(key)


def _poly2(coeffs: Sequence[float], u: float, v: float) -> float:
    c0, cu, cv, cuu, cuv, cvv = coeffs
    return c0 + cu * u + cv * v + cuu * u * u + cuv * u * v + cvv * v * v


def _norm_coords(cfg: WaferSimConfig, die: DieIndex) -> tuple[float, float]:
    half_w = (cfg.grid_width - 1) / 2.0
    half_h = (cfg.grid_height - 1) / 2.0
    return (die.col - half_w) / half_w, (die.row - half_h) / half_h


def programmed_offset(fp: FingerprintConfig, die: DieIndex) -> tuple[float, float]:
    """Per-die programmed offset; a fixed layout shared by every programmed
    wafer that uses the same layout seed."""
    if not fp.programmed:
        return 0.0, 0.0
    rng = _rng(fp.program_layout_seed, 5, die.col, die.row)
    levels = np.asarray(fp.programmed_levels_nm)
    dx = float(levels[rng.integers(0, len(levels))])
    dy = float(levels[rng.integers(0, len(levels))])
    return dx, dy


def smooth_field(cfg: WaferSimConfig, fp: FingerprintConfig,
                 die: DieIndex) -> tuple[float, float]:
    u, v = _norm_coords(cfg, die)
    return _poly2(fp.smooth_x, u, v), _poly2(fp.smooth_y, u, v)


def true_overlay(cfg: WaferSimConfig, fp: FingerprintConfig,
                 die: DieIndex) -> tuple[float, float]:
    """Noiseless per-die overlay: bias + smooth field + programmed offset."""
    sx, sy = smooth_field(cfg, fp, die)
    px, py = programmed_offset(fp, die)
    return fp.m1b_bias_x_nm + sx + px, fp.m1b_bias_y_nm + sy + py


def intra_die_overlay(cfg: WaferSimConfig, x_um: float, y_um: float) -> tuple[float, float]:
    """Deterministic intra-die perturbation of the effective overlay at a
    position within the die (intra-field uniformity)."""
    u = x_um / DIE_HALF_EXTENT_UM
    v = y_um / DIE_HALF_EXTENT_UM
    bowl = (u * u + v * v) / 2.0
    ix = cfg.intra_bowl_x_nm * bowl + cfg.intra_cross_x_nm * u * v
    iy = cfg.intra_bowl_y_nm * bowl - cfg.intra_cross_y_nm * u * v
    return ix, iy


def generate_overlay(cfg: WaferSimConfig, fp: FingerprintConfig,
                     grid: Sequence[DieIndex], step: DboStep,
                     seed: int) -> list[OverlayRecord]:
    """Overlay readings for every die at one step.

    Outlier site membership is drawn once per die from a step-independent
    stream and compared against the step's rate, so the outlier sets of the
    three steps are nested: AEI's outliers are a subset of ADI's and CMP's
    for every seed, by construction.
    """
    sigma = fp.noise_sigma(step)
    rate = fp.outlier_rate(step)
    step_i = _STEP_INDEX[step]
    clip = OVERLAY_SANITY_NM - 0.5
    records = []
    for die in grid:
        tx, ty = true_overlay(cfg, fp, die)
        u_out = _rng(seed, _S_OUTLIER_U, die.col, die.row).random(N_OVERLAY_SITES)
        rng = _rng(seed, _S_NOISE, step_i, die.col, die.row)
        nx = rng.normal(size=N_OVERLAY_SITES)
        ny = rng.normal(size=N_OVERLAY_SITES)
        mag_x = rng.uniform(fp.outlier_mag_lo_nm, fp.outlier_mag_hi_nm, N_OVERLAY_SITES)
        sign_x = rng.integers(0, 2, N_OVERLAY_SITES) * 2 - 1
        mag_y = rng.uniform(fp.outlier_mag_lo_nm, fp.outlier_mag_hi_nm, N_OVERLAY_SITES)
        sign_y = rng.integers(0, 2, N_OVERLAY_SITES) * 2 - 1
        is_out = u_out < rate
        vx = tx + sigma * nx + np.where(is_out, sign_x * mag_x, 0.0)
        vy = ty + sigma * ny + np.where(is_out, sign_y * mag_y, 0.0)
        vx = np.clip(vx, -clip, clip)
        vy = np.clip(vy, -clip, clip)
        records.append(OverlayRecord(die=die, step=step,
                                     values_x=tuple(float(x) for x in vx),
                                     values_y=tuple(float(y) for y in vy)))
    return records


def cd2_space(overlay_xy: tuple[float, float], structure: StructureId) -> float:
    """Noise-free space CD for a structure under a given overlay (nm).

    The gap responds to the overlay component across the lines: X for
    vertical lines, Y for horizontal lines. A shift that narrows AB gaps
    widens BA gaps by the same amount, so cd2(AB,k) + cd2(BA,7-k) is twice
    the designed gap whenever the floor is inactive.
    """
    o = overlay_xy[0] if structure.orientation is Orientation.VERTICAL else overlay_xy[1]
    sign = -1.0 if structure.family is Family.AB else 1.0
    return max(designed_gap(structure) + sign * o, CD2_FLOOR_NM)


def derive_cd2(die: DieIndex, target_x_um: float, target_y_um: float,
               overlay_xy: tuple[float, float], structure: StructureId,
               noise_sigma_nm: float = 0.0,
               rng: np.random.Generator | None = None,
               seed: int = 0) -> CdsemRecord:
    """One CD-SEM record for a structure at a target, given the effective
    overlay at that target."""
    if rng is None:
        rng = _rng(seed, _S_CD, die.col, die.row)
    value = cd2_space(overlay_xy, structure)
    if noise_sigma_nm > 0:
        value = max(value + noise_sigma_nm * float(rng.normal()), CD2_FLOOR_NM)
    return CdsemRecord(die=die, target_x_um=target_x_um, target_y_um=target_y_um,
                       structure=structure, cd2_nm=value)


def cap_gap_direction(orientation: Orientation) -> str:
    """Which overlay axis drives a fork structure's finger gap. Orientation
    names the structure's placement; a horizontally placed fork has vertical
    fingers, so its gap follows X overlay."""
    return "x" if orientation is Orientation.HORIZONTAL else "y"


def derive_capacitance(die: DieIndex, structure: StructureId, cd2_effective_nm: float,
                       model: CapacitanceModel,
                       rng: np.random.Generator | None = None,
                       seed: int = 0) -> tuple[CapacitanceRecord, bool]:
    """One capacitance reading plus whether a failure was injected.

    Draw order is fixed (noise, failure, mode, magnitude jitter) so a die's
    stream consumption never depends on outcomes.
    """
    if rng is None:
        rng = _rng(seed, _S_CAP, die.col, die.row)
    eta = float(rng.normal())
    u_fail = float(rng.random())
    u_mode = float(rng.random())
    jitter = float(rng.normal())
    nominal = model.nominal(cd2_effective_nm, structure.instance)
    value = nominal * (1.0 + model.sigma_rel * eta)
    failed = u_fail < model.fail_rate(cd2_effective_nm)
    if failed:
        if u_mode < model.open_fraction:
            value = nominal * model.open_factor * math.exp(model.fail_jitter * jitter)
        else:
            value = nominal * model.fail_magnitude * math.exp(model.fail_jitter * jitter)
    record = CapacitanceRecord(die=die, structure=structure, value_ff=value)
    return record, failed


def _jittered_fingerprint(cfg: WaferSimConfig, recipe: Recipe,
                          seed: int) -> FingerprintConfig:
    rng = _rng(seed, _S_FIELD)
    zx = rng.normal(size=6)
    zy = rng.normal(size=6)
    rel = cfg.smooth_jitter_rel
    sx = tuple(c * (1.0 + rel * z) for c, z in zip(cfg.fingerprint.smooth_x, zx))
    sy = tuple(c * (1.0 + rel * z) for c, z in zip(cfg.fingerprint.smooth_y, zy))
    return replace(cfg.fingerprint, smooth_x=sx, smooth_y=sy,
                   programmed=(recipe is Recipe.PROGRAMMED))


def n_targets_for_die(grid_position: int) -> int:
    """Target count cycles 5,5,5,5,4 over the canonical die order."""
    return 4 if grid_position % 5 == 4 else 5


def generate_wafer(wafer_id: str, recipe: Recipe, cfg: WaferSimConfig, seed: int,
                   capacitance: bool | None = None) -> SyntheticWafer:
    """Synthesize one wafer: overlay at all three steps from one shared true
    fingerprint, CD-SEM space CD on 4-5 targets per die, and (optionally)
    capacitance on the electrical-test die subset."""
    if capacitance is None:
        capacitance = cfg.capacitance_enabled
    grid = die_grid(cfg.grid_dies, cfg.grid_width, cfg.grid_height)
    cap_grid = die_grid(cfg.cap_dies, cfg.grid_width, cfg.grid_height)
    fp = _jittered_fingerprint(cfg, recipe, seed)

    overlay: list[OverlayRecord] = []
    for step in DboStep:
        overlay.extend(generate_overlay(cfg, fp, grid, step, seed))

    truth = {die: true_overlay(cfg, fp, die) for die in grid}

    cdsem: list[CdsemRecord] = []
    ab1_h = StructureId(Family.AB, 1, Orientation.HORIZONTAL)
    ab1_v = StructureId(Family.AB, 1, Orientation.VERTICAL)
    for pos, die in enumerate(grid):
        rng = _rng(seed, _S_CD, die.col, die.row)
        noise = rng.normal(size=(len(TARGET_TEMPLATE_UM), 2))
        tx, ty = truth[die]
        for t, (x_um, y_um) in enumerate(TARGET_TEMPLATE_UM[:n_targets_for_die(pos)]):
            ix, iy = intra_die_overlay(cfg, x_um, y_um)
            eff = (tx + ix, ty + iy)
            for orient_i, structure in enumerate((ab1_h, ab1_v)):
                value = cd2_space(eff, structure)
                value = max(value + cfg.cd_noise_sigma_nm * float(noise[t, orient_i]),
                            CD2_FLOOR_NM)
                cdsem.append(CdsemRecord(die=die, target_x_um=x_um, target_y_um=y_um,
                                         structure=structure, cd2_nm=value))

    cap_records: list[CapacitanceRecord] = []
    injected: list[int] = []
    if capacitance:
        all_structures = structures()
        for die in cap_grid:
            rng = _rng(seed, _S_CAP, die.col, die.row)
            tx, ty = truth[die]
            for structure in all_structures:
                x_um, y_um = TARGET_TEMPLATE_UM[structure.instance]
                ix, iy = intra_die_overlay(cfg, x_um, y_um)
                if cap_gap_direction(structure.orientation) == "x":
                    o = tx + ix
                else:
                    o = ty + iy
                sign = -1.0 if structure.family is Family.AB else 1.0
                cd2_eff = max(designed_gap(structure) + sign * o, CD2_FLOOR_NM)
                record, failed = derive_capacitance(die, structure, cd2_eff,
                                                    cfg.cap_model, rng=rng)
                if failed:
                    injected.append(len(cap_records))
                cap_records.append(record)

    dataset = WaferDataset(wafer_id=wafer_id, recipe=recipe, grid=grid,
                           overlay=tuple(overlay), cdsem=tuple(cdsem),
                           capacitance=tuple(cap_records), seed=seed)
    return SyntheticWafer(dataset=dataset, true_overlay=truth,
                          injected_failures=tuple(injected))


def wafer_seed(scenario_seed: int, index: int) -> int:
    """Stable per-wafer seed derived from the scenario seed and plan order."""
    ss = np.random.SeedSequence([scenario_seed, index])
    return int(ss.generate_state(1)[0])


def generate_scenario(scenario: Scenario, jobs: int = 1) -> list[SyntheticWafer]:
    """Generate every planned wafer; output is independent of jobs."""
    tasks = [(plan, wafer_seed(scenario.seed, i))
             for i, plan in enumerate(scenario.plans)]

    def build(task: tuple[WaferPlan, int]) -> SyntheticWafer:
        plan, seed = task
        return generate_wafer(plan.wafer_id, plan.recipe, scenario.sim, seed,
                              capacitance=plan.capacitance)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(build, tasks))
    return [build(t) for t in tasks]
