"""End-to-end prediction experiments: overlay readings in, fitted models,
metrics tables, prediction files and wafer maps out.

Two experiment kinds cover the toolkit's two questions:

* ``Cd2Prediction``: predict a die's space CD from its overlay readings at
  an early step.  Default protocol trains on wafers D02, D03, D11 and holds
  out D10.
* ``CapacitancePrediction``: predict comb capacitance from the same overlay
  features, optionally after density-based outlier cleaning.  Default
  protocol pools the electrical-test wafers and splits 80-20, stratified by
  wafer and die ring so held-out dies span the whole fingerprint.

Feature layout is fixed by the measurement physics.  A CD row carries the 26
overlay values in the direction across the lines (Y for horizontal
structures, X for vertical), the die column and row, and the target's
in-die coordinates: 30 features.  A capacitance row carries the 26 overlay
values in the direction across the fork fingers (X for horizontal
structures, Y for vertical), the die column and row, and the instance
index: 29 features.

Protocol rules the rest of the module enforces:

* The feature scaler and the cleaning radius are estimated from training
  rows only.  Outlier replacement means, by contrast, pool every row:
  cleaning is a dataset repair done once, before any split, and the report
  flags that choice under the ``leakage`` key.
* Metrics come from :mod:`waferwise.learn` and are recomputable from the
  persisted predictions CSV, which stores full-precision values.
* Cells of a report, one per (model, step, orientation, structure), are
  pure functions of the spec and the data.  ``run_experiment`` evaluates
  them in spec order and merges by cell identity; tree fitting consumes
  ``jobs``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib
import numpy as np
from matplotlib.cm import ScalarMappable
from matplotlib.colors import Normalize
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .clean import KNEE_WINDOW, DbscanParams, clean_capacitance, knee_eps
from .learn import (
    FeatureMatrix,
    FittedModel,
    ModelKind,
    ModelSpec,
    fit_forest,
    fit_linear,
    fit_scaler,
    fit_svr,
    mse,
    predict,
    r2,
)
from .model import (
    N_OVERLAY_SITES,
    DboStep,
    DieIndex,
    Orientation,
    StructureId,
    WaferDataset,
)

# Smallest training-row count the knee estimator is trusted on: the moving
# average needs the window plus a point of curvature on each side.
MIN_KNEE_ROWS = KNEE_WINDOW + 3

DEFAULT_TRAIN_IDS = ("D02", "D03", "D11")
DEFAULT_TEST_ID = "D10"


class ExperimentKind(str, Enum):
    CD2 = "Cd2Prediction"
    CAPACITANCE = "CapacitancePrediction"


@dataclass(frozen=True)
class ByWafer:
    """Hold out whole wafers: train on some, validate on one."""

    train_ids: tuple[str, ...] = DEFAULT_TRAIN_IDS
    test_id: str = DEFAULT_TEST_ID

    def __post_init__(self) -> None:
        if not self.train_ids:
            raise ValueError("ByWafer needs at least one training wafer")
        if self.test_id in self.train_ids:
            raise ValueError(
                f"test wafer {self.test_id!r} also listed for training")


@dataclass(frozen=True)
class Pooled8020:
    """Pool all rows and hold out a fraction, stratified by wafer and die
    ring (center/middle/edge) so test dies span the fingerprint."""

    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(
                f"test_fraction must be in (0, 1), got {self.test_fraction}")


def default_models(seed: int = 0) -> tuple[ModelSpec, ...]:
    """The four-model comparison set used by the reference experiments."""
    return tuple(ModelSpec(kind=k, seed=seed) for k in
                 (ModelKind.LINEAR, ModelKind.SVR,
                  ModelKind.RANDOM_FOREST, ModelKind.EXTRA_TREES))


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one experiment run.

    ``orientation`` selects the measurement rows and, through the direction
    rule, which overlay axis populates the features.  ``structure`` names
    the capacitance group (its instance field is ignored; instances are
    pooled and become a feature).  ``clean`` only applies to capacitance.
    ``split`` defaults per kind: by-wafer for CD, pooled 80-20 for
    capacitance.
    """

    kind: ExperimentKind
    dbo_step: DboStep
    orientation: Orientation
    structure: StructureId | None = None
    models: tuple[ModelSpec, ...] = field(default_factory=default_models)
    split: ByWafer | Pooled8020 | None = None
    clean: bool = True

    def __post_init__(self) -> None:
        if not self.models:
            raise ValueError("spec lists no models")
        seen = set()
        for m in self.models:
            key = (m.kind, m.seed)
            if key in seen:
                raise ValueError(
                    f"duplicate model cell {m.kind.value} seed {m.seed}")
            seen.add(key)
        if self.kind is ExperimentKind.CAPACITANCE:
            if self.structure is None:
                raise ValueError("capacitance experiments need a structure")
            if self.structure.orientation is not self.orientation:
                raise ValueError(
                    f"orientation {self.orientation.value} does not match "
                    f"structure orientation "
                    f"{self.structure.orientation.value}")
        elif self.structure is not None:
            raise ValueError("CD experiments take no structure; orientation "
                             "selects the rows")
        if self.split is None:
            default = (ByWafer() if self.kind is ExperimentKind.CD2
                       else Pooled8020())
            object.__setattr__(self, "split", default)


# ---------------------------------------------------------------------------
# Feature assembly


@dataclass(frozen=True)
class RowInfo:
    """Identity of one assembled row: which wafer, die, and source record.

    ``slot`` is the record's index in the wafer's cdsem or capacitance
    tuple, so a row can be traced back to its measurement.
    """

    wafer_id: str
    die: DieIndex
    slot: int


@dataclass(frozen=True, eq=False)
class Assembled:
    """Feature matrix, target vector, row identities, and the count of rows
    dropped because their die had no overlay at the requested step."""

    x: FeatureMatrix
    y: np.ndarray
    rows: tuple[RowInfo, ...]
    n_dropped: int


def cd_feature_direction(orientation: Orientation) -> str:
    """Overlay axis that moves a space CD: across the lines, so Y for
    horizontal structures and X for vertical ones."""
    return "y" if orientation is Orientation.HORIZONTAL else "x"


def cap_feature_direction(orientation: Orientation) -> str:
    """Overlay axis that moves a fork gap: a horizontally placed fork has
    vertical fingers, so its gap follows X overlay, and vice versa."""
    return "x" if orientation is Orientation.HORIZONTAL else "y"


def _overlay_lookup(wafer: WaferDataset, step: DboStep,
                    direction: str) -> dict[DieIndex, tuple[float, ...]]:
    out: dict[DieIndex, tuple[float, ...]] = {}
    for rec in wafer.overlay:
        if rec.step is step:
            out[rec.die] = rec.values_x if direction == "x" else rec.values_y
    return out


def _overlay_names(direction: str) -> list[str]:
    return [f"overlay_{direction}{i:02d}" for i in range(N_OVERLAY_SITES)]


def assemble_cd2_features(wafers: Sequence[WaferDataset], dbo_step: DboStep,
                          orientation: Orientation) -> Assembled:
    """One row per CD-SEM record of the requested orientation.

    Features: the die's 26 overlay values in the direction given by
    ``cd_feature_direction``, the die column and row, and the target's in-die
    coordinates.  Rows whose die has no overlay at ``dbo_step`` are dropped
    and counted on the result.
    """
    direction = cd_feature_direction(orientation)
    feats: list[list[float]] = []
    targets: list[float] = []
    rows: list[RowInfo] = []
    dropped = 0
    for wafer in wafers:
        lookup = _overlay_lookup(wafer, dbo_step, direction)
        for i, rec in enumerate(wafer.cdsem):
            if rec.structure.orientation is not orientation:
                continue
            values = lookup.get(rec.die)
            if values is None:
                dropped += 1
                continue
            feats.append([*values, float(rec.die.col), float(rec.die.row),
                          rec.target_x_um, rec.target_y_um])
            targets.append(rec.cd2_nm)
            rows.append(RowInfo(wafer.wafer_id, rec.die, i))
    if not feats:
        raise ValueError(
            f"no usable CD rows for orientation {orientation.value} at "
            f"step {dbo_step.value}")
    names = _overlay_names(direction) + ["die_col", "die_row",
                                         "target_x_um", "target_y_um"]
    x = FeatureMatrix(np.array(feats), tuple(names))
    return Assembled(x=x, y=np.array(targets), rows=tuple(rows),
                     n_dropped=dropped)


def _same_group(a: StructureId, b: StructureId) -> bool:
    # Instance is deliberately not part of group identity.
    return (a.family is b.family and a.level == b.level
            and a.orientation is b.orientation)


def assemble_cap_features(wafers: Sequence[WaferDataset], dbo_step: DboStep,
                          orientation: Orientation,
                          structure: StructureId) -> Assembled:
    """One row per capacitance record of the structure's group, every
    instance pooled.

    Features: the die's 26 overlay values in the direction given by
    ``cap_feature_direction``, the die column and row, and the instance
    index.  Rows whose die has no overlay at ``dbo_step`` are dropped and
    counted on the result.
    """
    if structure.orientation is not orientation:
        raise ValueError(
            f"orientation {orientation.value} does not match structure "
            f"orientation {structure.orientation.value}")
    direction = cap_feature_direction(orientation)
    feats: list[list[float]] = []
    targets: list[float] = []
    rows: list[RowInfo] = []
    dropped = 0
    for wafer in wafers:
        lookup = _overlay_lookup(wafer, dbo_step, direction)
        for i, rec in enumerate(wafer.capacitance):
            if not _same_group(rec.structure, structure):
                continue
            values = lookup.get(rec.die)
            if values is None:
                dropped += 1
                continue
            feats.append([*values, float(rec.die.col), float(rec.die.row),
                          float(rec.structure.instance)])
            targets.append(rec.value_ff)
            rows.append(RowInfo(wafer.wafer_id, rec.die, i))
    if not feats:
        raise ValueError(
            f"no capacitance rows for {structure.family.value}"
            f"{structure.level}-{structure.orientation.value} at step "
            f"{dbo_step.value}")
    names = _overlay_names(direction) + ["die_col", "die_row", "instance"]
    x = FeatureMatrix(np.array(feats), tuple(names))
    return Assembled(x=x, y=np.array(targets), rows=tuple(rows),
                     n_dropped=dropped)


# ---------------------------------------------------------------------------
# Splits


def _die_rings(rows: Sequence[RowInfo]) -> dict[tuple[str, DieIndex], int]:
    """Ring label (0 center, 1 middle, 2 edge) per (wafer, die), thirds by
    distance from the wafer's die centroid."""
    by_wafer: dict[str, set[DieIndex]] = {}
    for r in rows:
        by_wafer.setdefault(r.wafer_id, set()).add(r.die)
    rings: dict[tuple[str, DieIndex], int] = {}
    for wafer_id, dies in by_wafer.items():
        cx = float(np.mean([d.col for d in dies]))
        cy = float(np.mean([d.row for d in dies]))
        ordered = sorted(dies, key=lambda d: (np.hypot(d.col - cx,
                                                       d.row - cy),
                                              d.col, d.row))
        n = len(ordered)
        for i, die in enumerate(ordered):
            rings[(wafer_id, die)] = 3 * i // n
    return rings


def split_assignment(split: ByWafer | Pooled8020,
                     rows: Sequence[RowInfo]) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (train, test), both ascending.

    ByWafer assigns by wafer id and errors if a named wafer contributed no
    rows; rows from unnamed wafers are excluded.  Pooled8020 holds out the
    test fraction within each (wafer, die ring) stratum, deterministically
    from the split seed; strata are processed in sorted key order so the
    draw never depends on dict ordering.
    """
    if isinstance(split, ByWafer):
        present = {r.wafer_id for r in rows}
        for wafer_id in (*split.train_ids, split.test_id):
            if wafer_id not in present:
                raise ValueError(
                    f"split names wafer {wafer_id!r} but no rows came "
                    f"from it")
        train = [i for i, r in enumerate(rows)
                 if r.wafer_id in split.train_ids]
        test = [i for i, r in enumerate(rows) if r.wafer_id == split.test_id]
        return np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)

    rings = _die_rings(rows)
    strata: dict[tuple[str, int], list[int]] = {}
    for i, r in enumerate(rows):
        strata.setdefault((r.wafer_id, rings[(r.wafer_id, r.die)]),
                          []).append(i)
    rng = np.random.default_rng(split.seed)
    test_set: set[int] = set()
    for key in sorted(strata):
        idx = strata[key]
        n = len(idx)
        n_test = int(round(split.test_fraction * n))
        if n >= 2:
            n_test = min(max(n_test, 1), n - 1)
        else:
            n_test = 0
        order = rng.permutation(n)
        test_set.update(idx[j] for j in order[:n_test])
    train = [i for i in range(len(rows)) if i not in test_set]
    test = sorted(test_set)
    return np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)


# ---------------------------------------------------------------------------
# Cleaning with a training-rows-only radius


def _cap_scales(feats: np.ndarray) -> np.ndarray:
    scales = feats.std(axis=0)
    for j, name in enumerate(("capacitance", "die column", "die row")):
        if scales[j] == 0.0:
            warnings.warn(f"zero variance in {name} over training rows; "
                          f"scaling skipped for that coordinate",
                          stacklevel=3)
            scales[j] = 1.0
    return scales


def _clean_targets(spec: ExperimentSpec, wafers: Sequence[WaferDataset],
                   data: Assembled, train_idx: np.ndarray,
                   meta: dict[str, str]) -> np.ndarray:
    """Replace outlier capacitance targets, radius from training rows only.

    The dbscan features per record are (value, die col, die row), the same
    embedding ``clean_capacitance`` uses.  Scale divisors and the knee
    radius come from this wafer's training rows, falling back to the pooled
    training rows of all wafers when a wafer has too few (a by-wafer split
    leaves the test wafer with none).  Replacement means pool the whole
    group; that is the documented leakage.
    """
    feats_all = np.column_stack([data.y,
                                 [float(r.die.col) for r in data.rows],
                                 [float(r.die.row) for r in data.rows]])
    train_mask = np.zeros(len(data.rows), dtype=bool)
    train_mask[train_idx] = True
    pooled = feats_all[train_mask]
    if pooled.shape[0] < MIN_KNEE_ROWS:
        raise ValueError(
            f"only {pooled.shape[0]} training rows; need at least "
            f"{MIN_KNEE_ROWS} to size the cleaning radius")

    y = data.y.copy()
    row_pos = {(r.wafer_id, r.slot): i for i, r in enumerate(data.rows)}
    wafer_ids = [r.wafer_id for r in data.rows]
    for wafer in wafers:
        if wafer.wafer_id not in wafer_ids:
            continue
        own = feats_all[train_mask
                        & (np.array(wafer_ids) == wafer.wafer_id)]
        basis = own
        if own.shape[0] < MIN_KNEE_ROWS:
            warnings.warn(
                f"wafer {wafer.wafer_id} has {own.shape[0]} training rows; "
                f"cleaning radius estimated from the pooled training rows",
                stacklevel=3)
            basis = pooled
        scales = _cap_scales(basis)
        knee = knee_eps(basis / scales, 2)
        if knee.weak:
            warnings.warn(f"weak knee on wafer {wafer.wafer_id}; cleaning "
                          f"radius may be unreliable", stacklevel=3)
        eps = max(knee.eps, 1e-12)
        _, report = clean_capacitance(
            wafer, spec.structure,
            params=DbscanParams(eps=eps, min_samples=2),
            scale=tuple(float(s) for s in scales))
        for rep in report.replaced:
            pos = row_pos.get((wafer.wafer_id, rep.index))
            if pos is not None:
                y[pos] = rep.new_value
        meta[f"clean.eps.{wafer.wafer_id}"] = repr(eps)
        meta[f"clean.weak_knee.{wafer.wafer_id}"] = repr(knee.weak)
        meta[f"clean.outliers.{wafer.wafer_id}"] = repr(report.n_outliers)
    meta["leakage"] = ("outlier replacement means pool training and test "
                       "rows by design; radius and scales are "
                       "training-only")
    return y


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class PredictionRow:
    """One prediction, traceable to its measurement."""

    wafer_id: str
    die_col: int
    die_row: int
    slot: int
    partition: str  # "train" or "test"
    y_true: float
    y_pred: float


@dataclass(frozen=True, eq=False)
class CellResult:
    """Metrics and predictions for one (model, step, orientation,
    structure) cell."""

    model: ModelSpec
    kind: ExperimentKind
    dbo_step: DboStep
    orientation: Orientation
    structure: str
    r2_train: float
    r2_test: float
    mse_test: float
    n_train: int
    n_test: int
    predictions: tuple[PredictionRow, ...]
    notes: tuple[str, ...]
    fitted: FittedModel | None = None

    @property
    def identity(self) -> tuple[str, int, str, str, str]:
        return (self.model.kind.value, self.model.seed, self.dbo_step.value,
                self.orientation.value, self.structure)

    def per_die_mae(self, wafer_id: str | None = None,
                    partition: str = "test") -> dict[DieIndex, float]:
        """Mean absolute prediction error per die, for the wafer map."""
        errs: dict[DieIndex, list[float]] = {}
        for p in self.predictions:
            if p.partition != partition:
                continue
            if wafer_id is not None and p.wafer_id != wafer_id:
                continue
            die = DieIndex(p.die_col, p.die_row)
            errs.setdefault(die, []).append(abs(p.y_true - p.y_pred))
        if not errs:
            raise ValueError(
                f"no {partition} predictions"
                + (f" for wafer {wafer_id!r}" if wafer_id else ""))
        return {die: float(np.mean(v)) for die, v in errs.items()}


@dataclass(frozen=True, eq=False)
class FitReport:
    """Cells in spec order, per-model failures, and run metadata (split,
    seeds, row counts, cleaning radii, conventions)."""

    cells: tuple[CellResult, ...]
    failures: tuple[tuple[str, str], ...]
    metadata: dict[str, str]

    def cell(self, kind: ModelKind, seed: int = 0) -> CellResult:
        for c in self.cells:
            if c.model.kind is kind and c.model.seed == seed:
                return c
        raise KeyError(f"no cell for {kind.value} seed {seed}")


def _structure_label(spec: ExperimentSpec) -> str:
    if spec.structure is None:
        return ""
    s = spec.structure
    return f"{s.family.value}{s.level}-{s.orientation.value}"


def _fit_one(x_train, y_train, model: ModelSpec, scaler,
             jobs: int) -> FittedModel:
    if model.kind is ModelKind.LINEAR:
        return fit_linear(x_train, y_train, scaler=scaler, seed=model.seed)
    if model.kind is ModelKind.SVR:
        return fit_svr(x_train, y_train, model, scaler=scaler)
    return fit_forest(x_train, y_train, model, scaler=scaler, jobs=jobs)


def run_experiment(spec: ExperimentSpec, wafers: Sequence[WaferDataset],
                   jobs: int = 1) -> FitReport:
    """Assemble features, split, optionally clean, fit every model, score.

    The split is decided first, on row identities alone, so nothing about
    it depends on measured values.  The scaler is fitted on training rows
    only and shared by every model.  A model that fails to fit lands in
    ``failures`` with its error message; the others still report.
    """
    if spec.kind is ExperimentKind.CD2:
        data = assemble_cd2_features(wafers, spec.dbo_step, spec.orientation)
    else:
        data = assemble_cap_features(wafers, spec.dbo_step, spec.orientation,
                                     spec.structure)
    train_idx, test_idx = split_assignment(spec.split, data.rows)
    if train_idx.size < 2 or test_idx.size < 1:
        raise ValueError(
            f"split left {train_idx.size} train and {test_idx.size} test "
            f"rows; need at least 2 and 1")

    meta: dict[str, str] = {
        "kind": spec.kind.value,
        "dbo_step": spec.dbo_step.value,
        "orientation": spec.orientation.value,
        "structure": _structure_label(spec),
        "dropped_rows": repr(data.n_dropped),
        "n_train": repr(int(train_idx.size)),
        "n_test": repr(int(test_idx.size)),
    }
    if isinstance(spec.split, ByWafer):
        train_wafers = sorted({data.rows[i].wafer_id for i in train_idx})
        test_wafers = sorted({data.rows[i].wafer_id for i in test_idx})
        if set(train_wafers) & set(test_wafers):
            raise RuntimeError("wafer-id audit failed: a wafer appears in "
                               "both partitions")
        if (set(train_wafers) - set(spec.split.train_ids)
                or test_wafers != [spec.split.test_id]):
            raise RuntimeError("wafer-id audit failed: partition does not "
                               "match the split spec")
        meta["split"] = "ByWafer"
        meta["split.train_ids"] = ",".join(train_wafers)
        meta["split.test_id"] = spec.split.test_id
    else:
        meta["split"] = "Pooled8020"
        meta["split.seed"] = repr(spec.split.seed)
        meta["split.test_fraction"] = repr(spec.split.test_fraction)

    y = data.y
    if spec.kind is ExperimentKind.CAPACITANCE:
        meta["clean"] = repr(bool(spec.clean))
        if spec.clean:
            y = _clean_targets(spec, wafers, data, train_idx, meta)

    x_train = FeatureMatrix(data.x.values[train_idx], data.x.col_names)
    x_test = FeatureMatrix(data.x.values[test_idx], data.x.col_names)
    y_train, y_test = y[train_idx], y[test_idx]
    scaler = fit_scaler(x_train)
    meta["scaler.scales"] = ",".join(repr(s) for s in scaler.scales)

    cells: list[CellResult] = []
    failures: list[tuple[str, str]] = []
    seen: set[tuple] = set()
    label = _structure_label(spec)
    for model in spec.models:
        name = f"{model.kind.value}/seed{model.seed}"
        try:
            fitted = _fit_one(x_train, y_train, model, scaler, jobs)
            pred_train = predict(fitted, x_train)
            pred_test = predict(fitted, x_test)
            preds = tuple(
                PredictionRow(data.rows[i].wafer_id, data.rows[i].die.col,
                              data.rows[i].die.row, data.rows[i].slot,
                              part, float(yt), float(yp))
                for part, part_idx, yt_arr, yp_arr in
                (("train", train_idx, y_train, pred_train),
                 ("test", test_idx, y_test, pred_test))
                for i, yt, yp in zip(part_idx, yt_arr, yp_arr))
            cell = CellResult(
                model=model, kind=spec.kind, dbo_step=spec.dbo_step,
                orientation=spec.orientation, structure=label,
                r2_train=r2(y_train, pred_train),
                r2_test=r2(y_test, pred_test),
                mse_test=mse(y_test, pred_test),
                n_train=int(train_idx.size), n_test=int(test_idx.size),
                predictions=preds, notes=fitted.notes, fitted=fitted)
            if cell.identity in seen:
                raise RuntimeError(f"duplicate cell {cell.identity}")
            seen.add(cell.identity)
            cells.append(cell)
        except (ValueError, RuntimeError) as err:
            failures.append((name, str(err)))
    return FitReport(cells=tuple(cells), failures=tuple(failures),
                     metadata=meta)


# ---------------------------------------------------------------------------
# Persistence: report and prediction CSVs


REPORT_HEADER = ("model", "seed", "step", "orientation", "structure",
                 "r2_train", "r2_test", "mse_test", "n_train", "n_test")
PREDICTIONS_HEADER = ("wafer", "die_col", "die_row", "slot", "partition",
                      "y_true", "y_pred")


def report_to_csv(report: FitReport, path) -> None:
    """One row per cell, full-precision floats, after a commented metadata
    preamble (lines starting with '#')."""
    with open(path, "w", newline="") as fh:
        for key in sorted(report.metadata):
            fh.write(f"# {key}={report.metadata[key]}\n")
        for name, message in report.failures:
            fh.write(f"# failed.{name}={message}\n")
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for c in report.cells:
            writer.writerow([c.model.kind.value, c.model.seed,
                             c.dbo_step.value, c.orientation.value,
                             c.structure, repr(c.r2_train), repr(c.r2_test),
                             repr(c.mse_test), c.n_train, c.n_test])


def predictions_to_csv(cell: CellResult, path) -> None:
    """Every train and test prediction at full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for p in cell.predictions:
            writer.writerow([p.wafer_id, p.die_col, p.die_row, p.slot,
                             p.partition, repr(p.y_true), repr(p.y_pred)])


def metrics_from_predictions(path) -> dict[str, float]:
    """Recompute r2_train, r2_test and mse_test from a predictions CSV.

    Because the CSV stores full-precision values and row order, the result
    matches the report to the last bit.
    """
    y_true: dict[str, list[float]] = {"train": [], "test": []}
    y_pred: dict[str, list[float]] = {"train": [], "test": []}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            y_true[row["partition"]].append(float(row["y_true"]))
            y_pred[row["partition"]].append(float(row["y_pred"]))
    if not y_true["train"] or not y_true["test"]:
        raise ValueError(f"{path} is missing a train or test partition")
    tr_t, tr_p = np.array(y_true["train"]), np.array(y_pred["train"])
    te_t, te_p = np.array(y_true["test"]), np.array(y_pred["test"])
    return {"r2_train": r2(tr_t, tr_p), "r2_test": r2(te_t, te_p),
            "mse_test": mse(te_t, te_p)}


# ---------------------------------------------------------------------------
# Wafer maps


@dataclass(frozen=True)
class RenderResult:
    """Where the map landed plus the color scale and die rectangles, the
    latter in data coordinates for layout checks."""

    svg_path: str
    csv_path: str
    vmin: float
    vmax: float
    die_bounds: tuple[tuple[float, float, float, float], ...]


def color_limits(values: Iterable[float]) -> tuple[float, float]:
    """Color scale bounds; a degenerate range widens to a visible band."""
    arr = np.asarray(list(values), dtype=float)
    vmin, vmax = float(arr.min()), float(arr.max())
    if vmax <= vmin:
        vmin, vmax = vmin - 0.5, vmax + 0.5
    return vmin, vmax


def render_wafer_map(errors: Mapping[DieIndex, float], path, *,
                     title: str = "per-die mean |error|",
                     units: str = "nm") -> RenderResult:
    """Draw a color-scaled die grid to an SVG and write its CSV twin.

    Layout and bytes are deterministic: dies render in (row, col) order as
    unit squares, the SVG carries no timestamp, and hashed element ids use
    a fixed salt.
    """
    if not errors:
        raise ValueError("empty error map")
    items = sorted(errors.items(), key=lambda kv: (kv[0].row, kv[0].col))
    values = np.array([v for _, v in items], dtype=float)
    if not np.isfinite(values).all():
        raise ValueError("error map contains non-finite values")
    vmin, vmax = color_limits(values)
    norm = Normalize(vmin, vmax)
    cmap = matplotlib.colormaps["viridis"]

    fig = Figure(figsize=(6.4, 5.2))
    ax = fig.add_subplot()
    bounds = []
    for die, value in items:
        ax.add_patch(Rectangle((die.col - 0.5, die.row - 0.5), 1.0, 1.0,
                               facecolor=cmap(norm(value)),
                               edgecolor="white", linewidth=0.4))
        bounds.append((die.col - 0.5, die.row - 0.5,
                       die.col + 0.5, die.row + 0.5))
    cols = [d.col for d, _ in items]
    rows = [d.row for d, _ in items]
    ax.set_xlim(min(cols) - 1.0, max(cols) + 1.0)
    ax.set_ylim(min(rows) - 1.0, max(rows) + 1.0)
    ax.set_aspect("equal")
    ax.set_xlabel("die column")
    ax.set_ylabel("die row")
    ax.set_title(title)
    fig.colorbar(ScalarMappable(norm=norm, cmap=cmap), ax=ax, label=units)

    svg_path = Path(path)
    if svg_path.suffix != ".svg":
        svg_path = svg_path.with_suffix(".svg")
    csv_path = svg_path.with_suffix(".csv")
    with matplotlib.rc_context({"svg.hashsalt": "waferwise"}):
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("die_col", "die_row", "value"))
        for (die, value), _ in zip(items, bounds):
            writer.writerow([die.col, die.row, repr(float(value))])
    return RenderResult(svg_path=str(svg_path), csv_path=str(csv_path),
                        vmin=vmin, vmax=vmax, die_bounds=tuple(bounds))
