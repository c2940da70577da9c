"""Domain types for double-patterned wafer metrology datasets.

A wafer carries three kinds of measurements: per-die overlay readings taken
at three process steps, space-CD values from CD-SEM targets, and capacitance
readings from fork-fork test structures. The types here are plain records;
`validate` reports invariant violations as data instead of raising, so that
ingested files can be audited without aborting on the first bad row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

N_OVERLAY_SITES = 26
OVERLAY_SANITY_NM = 50.0

GAP_BASE_NM = 24.0
GAP_STEP_NM = 2.0
N_LEVELS = 6
N_INSTANCES = 5

# Nominal layout value used when quoting prediction errors as percentages of
# the AB1 design target. Synthesis itself uses designed_gap (34 nm for AB1).
AB1_DESIGN_TARGET_NM = 32.0

DEFAULT_GRID_DIES = 149
DEFAULT_CAP_DIES = 127
GRID_WIDTH = 13
GRID_HEIGHT = 13

MIN_TARGETS_PER_DIE = 4
MAX_TARGETS_PER_DIE = 5


class DboStep(str, Enum):
    """Process step at which overlay was measured."""

    ADI = "ADI"
    AEI = "AEI"
    CMP = "CMP"


class Family(str, Enum):
    """Structure family: which of the two interleaved patterns leads."""

    AB = "AB"
    BA = "BA"


class Orientation(str, Enum):
    HORIZONTAL = "H"
    VERTICAL = "V"


class Recipe(str, Enum):
    NON_PROGRAMMED = "NonProgrammed"
    PROGRAMMED = "Programmed"


@dataclass(frozen=True, order=True)
class DieIndex:
    """Grid position of a die; column first, row second."""

    col: int
    row: int


@dataclass(frozen=True)
class StructureId:
    """Identifies one measured structure on a die.

    level runs 1..6 (gap ladder position), instance 0..4 (repeated copies of
    the same structure at different die positions). Range violations raise at
    construction: a StructureId is meaningless outside the layout.
    """

    family: Family
    level: int
    orientation: Orientation
    instance: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.level <= N_LEVELS:
            raise ValueError(f"structure level must be 1..{N_LEVELS}, got {self.level}")
        if not 0 <= self.instance < N_INSTANCES:
            raise ValueError(
                f"structure instance must be 0..{N_INSTANCES - 1}, got {self.instance}"
            )


def designed_gap(structure: StructureId) -> float:
    """Designed space CD in nm for a structure's gap ladder position.

    AB gaps narrow with level (34 nm down to 24 nm), BA gaps widen (24 nm up
    to 34 nm), so designed_gap(AB, k) == designed_gap(BA, 7 - k).
    """
    if structure.family is Family.AB:
        return GAP_BASE_NM + GAP_STEP_NM * (N_LEVELS - structure.level)
    return GAP_BASE_NM + GAP_STEP_NM * (structure.level - 1)


@dataclass(frozen=True)
class OverlayRecord:
    """Overlay readings for one die at one step; one value per site, in nm."""

    die: DieIndex
    step: DboStep
    values_x: tuple[float, ...]
    values_y: tuple[float, ...]


@dataclass(frozen=True)
class CdsemRecord:
    """One CD-SEM space-CD measurement at a target position on a die."""

    die: DieIndex
    target_x_um: float
    target_y_um: float
    structure: StructureId
    cd2_nm: float


@dataclass(frozen=True)
class CapacitanceRecord:
    """One capacitance reading (fF) of a fork-fork structure instance."""

    die: DieIndex
    structure: StructureId
    value_ff: float
    flagged_outlier: bool = False


@dataclass(frozen=True)
class WaferDataset:
    wafer_id: str
    recipe: Recipe
    grid: tuple[DieIndex, ...]
    overlay: tuple[OverlayRecord, ...] = ()
    cdsem: tuple[CdsemRecord, ...] = ()
    capacitance: tuple[CapacitanceRecord, ...] = ()
    seed: int = 0


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate()."""

    record_kind: str
    index: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.record_kind}[{self.index}].{self.field}: {self.message}"


def die_grid(n_dies: int = DEFAULT_GRID_DIES, width: int = GRID_WIDTH,
             height: int = GRID_HEIGHT) -> tuple[DieIndex, ...]:
    """Build a wafer die layout: the n cells of a width x height grid closest
    to the grid center, approximating a round wafer. Ordering (and therefore
    tie-breaking at equal radius) is by (radius^2, row, col) and is the
    canonical die order used elsewhere.
    """
    if n_dies < 1 or n_dies > width * height:
        raise ValueError(f"n_dies must be 1..{width * height}, got {n_dies}")
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    cells = [DieIndex(c, r) for r in range(height) for c in range(width)]
    cells.sort(key=lambda d: ((d.col - cx) ** 2 + (d.row - cy) ** 2, d.row, d.col))
    return tuple(cells[:n_dies])


def _finite(x: float) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)


def _check_overlay(rec: OverlayRecord, i: int, dies: set[DieIndex],
                   out: list[Violation]) -> None:
    if rec.die not in dies:
        out.append(Violation("OverlayRecord", i, "die",
                             f"die {rec.die} not in wafer grid"))
    for name, values in (("values_x", rec.values_x), ("values_y", rec.values_y)):
        if len(values) != N_OVERLAY_SITES:
            out.append(Violation("OverlayRecord", i, name,
                                 f"expected {N_OVERLAY_SITES} values, got {len(values)}"))
        for v in values:
            if not _finite(v):
                out.append(Violation("OverlayRecord", i, name, f"non-finite value {v!r}"))
                break
        for v in values:
            if _finite(v) and abs(v) >= OVERLAY_SANITY_NM:
                out.append(Violation(
                    "OverlayRecord", i, name,
                    f"|{v}| nm exceeds sanity bound {OVERLAY_SANITY_NM} nm"))
                break


def validate(dataset: WaferDataset) -> list[Violation]:
    """Check every type invariant; returns an empty list iff all hold.

    Violations are data, not failures: callers decide whether to abort.
    """
    out: list[Violation] = []
    dies = set(dataset.grid)
    if len(dies) != len(dataset.grid):
        out.append(Violation("WaferDataset", 0, "grid", "duplicate die positions"))

    seen_steps: set[tuple[DieIndex, DboStep]] = set()
    for i, rec in enumerate(dataset.overlay):
        _check_overlay(rec, i, dies, out)
        key = (rec.die, rec.step)
        if key in seen_steps:
            out.append(Violation("OverlayRecord", i, "step",
                                 f"duplicate record for die {rec.die} at {rec.step.value}"))
        seen_steps.add(key)

    targets_per_die: dict[DieIndex, set[tuple[float, float]]] = {}
    for i, rec in enumerate(dataset.cdsem):
        if rec.die not in dies:
            out.append(Violation("CdsemRecord", i, "die",
                                 f"die {rec.die} not in wafer grid"))
        if not _finite(rec.cd2_nm) or rec.cd2_nm <= 0:
            out.append(Violation("CdsemRecord", i, "cd2_nm",
                                 f"cd2 must be finite and > 0, got {rec.cd2_nm!r}"))
        targets_per_die.setdefault(rec.die, set()).add(
            (rec.target_x_um, rec.target_y_um))
    for die, targets in sorted(targets_per_die.items()):
        if not MIN_TARGETS_PER_DIE <= len(targets) <= MAX_TARGETS_PER_DIE:
            first = next(i for i, r in enumerate(dataset.cdsem) if r.die == die)
            out.append(Violation(
                "CdsemRecord", first, "die",
                f"die {die} has {len(targets)} targets, expected "
                f"{MIN_TARGETS_PER_DIE}..{MAX_TARGETS_PER_DIE}"))

    for i, rec in enumerate(dataset.capacitance):
        if rec.die not in dies:
            out.append(Violation("CapacitanceRecord", i, "die",
                                 f"die {rec.die} not in wafer grid"))
        if not _finite(rec.value_ff):
            out.append(Violation("CapacitanceRecord", i, "value_ff",
                                 f"non-finite value {rec.value_ff!r}"))
        if rec.flagged_outlier:
            out.append(Violation("CapacitanceRecord", i, "flagged_outlier",
                                 "flag must be false at ingestion"))
    return out


def structures(families: Iterable[Family] = (Family.AB, Family.BA),
               orientations: Iterable[Orientation] = (Orientation.HORIZONTAL,
                                                      Orientation.VERTICAL),
               instances: Sequence[int] = range(N_INSTANCES)) -> list[StructureId]:
    """Enumerate structure ids in canonical order (family, level, orientation,
    instance)."""
    out = []
    for fam in families:
        for level in range(1, N_LEVELS + 1):
            for orient in orientations:
                for inst in instances:
                    out.append(StructureId(fam, level, orient, inst))
    return out
