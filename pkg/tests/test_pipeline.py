"""Experiment pipeline: feature assembly, splits, leakage guards, reports,
and wafer maps."""

import csv
from dataclasses import replace

import numpy as np
import pytest

from waferwise import pipeline as pl
from waferwise.fabsim import default_scenario, generate_scenario
from waferwise.learn import ModelKind, ModelSpec, SvrSpec
from waferwise.model import (
    N_OVERLAY_SITES,
    CapacitanceRecord,
    CdsemRecord,
    DboStep,
    DieIndex,
    Family,
    Orientation,
    OverlayRecord,
    Recipe,
    StructureId,
    WaferDataset,
    die_grid,
)

LINEAR = (ModelSpec(kind=ModelKind.LINEAR),)
BA4_H = StructureId(Family.BA, 4, Orientation.HORIZONTAL)


@pytest.fixture(scope="module")
def wafers():
    return [w.dataset for w in generate_scenario(default_scenario(seed=0))]


def _cd2_spec(**kw):
    base = dict(kind=pl.ExperimentKind.CD2, dbo_step=DboStep.AEI,
                orientation=Orientation.HORIZONTAL, models=LINEAR)
    base.update(kw)
    return pl.ExperimentSpec(**base)


def _cap_spec(**kw):
    base = dict(kind=pl.ExperimentKind.CAPACITANCE, dbo_step=DboStep.AEI,
                orientation=Orientation.HORIZONTAL, structure=BA4_H,
                models=LINEAR)
    base.update(kw)
    return pl.ExperimentSpec(**base)


def _directional_wafer(x_value: float) -> WaferDataset:
    """Tiny wafer whose overlay is nonzero in X only: site i reads
    x_value + i in X and exactly zero in Y, at every step."""
    dies = (DieIndex(0, 0), DieIndex(1, 0), DieIndex(0, 1))
    overlay = tuple(
        OverlayRecord(die=d, step=s,
                      values_x=tuple(x_value + i for i in range(N_OVERLAY_SITES)),
                      values_y=(0.0,) * N_OVERLAY_SITES)
        for d in dies for s in DboStep)
    cdsem = tuple(
        CdsemRecord(die=d, target_x_um=1.5, target_y_um=-2.0,
                    structure=StructureId(Family.AB, 1, ori), cd2_nm=25.0 + i)
        for i, d in enumerate(dies) for ori in Orientation)
    caps = tuple(
        CapacitanceRecord(die=d, structure=StructureId(Family.BA, 4, ori, inst),
                          value_ff=2.0 + 0.01 * inst)
        for d in dies for ori in Orientation for inst in range(5))
    return WaferDataset(wafer_id="T1", recipe=Recipe.NON_PROGRAMMED,
                        grid=dies, overlay=overlay, cdsem=cdsem,
                        capacitance=caps)


# ---------------------------------------------------------------------------
# Feature assembly


def test_cd2_assembly_shape_and_counts(wafers):
    data = pl.assemble_cd2_features(wafers, DboStep.AEI,
                                    Orientation.HORIZONTAL)
    assert data.x.shape[1] == 30
    assert data.n_dropped == 0
    per_wafer = {}
    for r in data.rows:
        per_wafer[r.wafer_id] = per_wafer.get(r.wafer_id, 0) + 1
    assert set(per_wafer) == {"D02", "D03", "D10", "D11"}
    for count in per_wafer.values():
        assert count > 700
    assert data.x.col_names[-4:] == ("die_col", "die_row",
                                     "target_x_um", "target_y_um")
    assert data.y.shape == (data.x.shape[0],)


def test_cd2_direction_rule_follows_orientation():
    wafer = _directional_wafer(3.0)
    horizontal = pl.assemble_cd2_features([wafer], DboStep.ADI,
                                          Orientation.HORIZONTAL)
    vertical = pl.assemble_cd2_features([wafer], DboStep.ADI,
                                        Orientation.VERTICAL)
    # Horizontal lines respond to Y overlay, which is identically zero here.
    assert np.all(horizontal.x.values[:, :N_OVERLAY_SITES] == 0.0)
    assert np.all(vertical.x.values[:, :N_OVERLAY_SITES] >= 3.0)
    assert horizontal.x.col_names[0] == "overlay_y00"
    assert vertical.x.col_names[0] == "overlay_x00"


def test_cap_direction_rule_is_flipped():
    wafer = _directional_wafer(3.0)
    horizontal = pl.assemble_cap_features(
        [wafer], DboStep.ADI, Orientation.HORIZONTAL,
        StructureId(Family.BA, 4, Orientation.HORIZONTAL))
    vertical = pl.assemble_cap_features(
        [wafer], DboStep.ADI, Orientation.VERTICAL,
        StructureId(Family.BA, 4, Orientation.VERTICAL))
    # A horizontal fork's gap follows X overlay: opposite of the CD rule.
    assert np.all(horizontal.x.values[:, :N_OVERLAY_SITES] >= 3.0)
    assert np.all(vertical.x.values[:, :N_OVERLAY_SITES] == 0.0)


def test_cap_assembly_pools_instances(wafers):
    data = pl.assemble_cap_features(wafers, DboStep.AEI,
                                    Orientation.HORIZONTAL, BA4_H)
    assert data.x.shape[1] == 29
    assert data.x.col_names[-3:] == ("die_col", "die_row", "instance")
    # Two electrical-test wafers, 127 dies, 5 instances each.
    assert data.x.shape[0] == 2 * 127 * 5
    assert set(data.x.values[:, -1]) == {0.0, 1.0, 2.0, 3.0, 4.0}
    assert {r.wafer_id for r in data.rows} == {"D02", "D10"}


def test_cap_assembly_rejects_orientation_mismatch(wafers):
    with pytest.raises(ValueError, match="does not match"):
        pl.assemble_cap_features(wafers, DboStep.AEI, Orientation.VERTICAL,
                                 BA4_H)


def test_missing_overlay_drops_rows_and_reports(wafers):
    wafer = wafers[0]
    victim = wafer.cdsem[0].die
    thinned = replace(wafer, overlay=tuple(
        rec for rec in wafer.overlay if rec.die != victim))
    expected = sum(1 for rec in wafer.cdsem
                   if rec.die == victim
                   and rec.structure.orientation is Orientation.HORIZONTAL)
    assert expected > 0
    data = pl.assemble_cd2_features([thinned], DboStep.AEI,
                                    Orientation.HORIZONTAL)
    assert data.n_dropped == expected
    assert all(r.die != victim for r in data.rows)


def test_assembly_with_no_usable_rows_raises(wafers):
    bare = replace(wafers[0], overlay=())
    with pytest.raises(ValueError, match="no usable CD rows"):
        pl.assemble_cd2_features([bare], DboStep.AEI, Orientation.HORIZONTAL)


# ---------------------------------------------------------------------------
# Splits


def test_by_wafer_split_audits_ids(wafers):
    data = pl.assemble_cd2_features(wafers, DboStep.AEI,
                                    Orientation.HORIZONTAL)
    train, test = pl.split_assignment(pl.ByWafer(), data.rows)
    assert {data.rows[i].wafer_id for i in train} == {"D02", "D03", "D11"}
    assert {data.rows[i].wafer_id for i in test} == {"D10"}
    assert len(set(train) | set(test)) == len(data.rows)


def test_by_wafer_split_excludes_unnamed_wafers(wafers):
    data = pl.assemble_cd2_features(wafers, DboStep.AEI,
                                    Orientation.HORIZONTAL)
    split = pl.ByWafer(train_ids=("D02", "D03"), test_id="D10")
    train, test = pl.split_assignment(split, data.rows)
    excluded = sum(1 for r in data.rows if r.wafer_id == "D11")
    assert excluded > 0
    assert len(train) + len(test) == len(data.rows) - excluded


def test_by_wafer_split_names_missing_wafer(wafers):
    data = pl.assemble_cd2_features(wafers, DboStep.AEI,
                                    Orientation.HORIZONTAL)
    with pytest.raises(ValueError, match="D99"):
        pl.split_assignment(pl.ByWafer(train_ids=("D02", "D99")), data.rows)


def test_by_wafer_split_rejects_overlapping_ids():
    with pytest.raises(ValueError, match="also listed"):
        pl.ByWafer(train_ids=("D02", "D10"), test_id="D10")


def test_pooled_split_is_seeded_and_stratified(wafers):
    data = pl.assemble_cap_features(wafers, DboStep.AEI,
                                    Orientation.HORIZONTAL, BA4_H)
    train_a, test_a = pl.split_assignment(pl.Pooled8020(seed=3), data.rows)
    train_b, test_b = pl.split_assignment(pl.Pooled8020(seed=3), data.rows)
    assert np.array_equal(train_a, train_b)
    assert np.array_equal(test_a, test_b)
    _, test_c = pl.split_assignment(pl.Pooled8020(seed=4), data.rows)
    assert not np.array_equal(test_a, test_c)

    assert len(set(train_a) & set(test_a)) == 0
    assert len(train_a) + len(test_a) == len(data.rows)
    frac = len(test_a) / len(data.rows)
    assert 0.17 <= frac <= 0.23

    # Every (wafer, ring) stratum gives up roughly its share of test rows.
    rings = pl._die_rings(data.rows)
    strata = {}
    for i, r in enumerate(data.rows):
        key = (r.wafer_id, rings[(r.wafer_id, r.die)])
        strata.setdefault(key, []).append(i)
    assert len(strata) == 6
    test_set = set(test_a)
    for key, idx in strata.items():
        share = sum(1 for i in idx if i in test_set) / len(idx)
        assert 0.1 <= share <= 0.3, (key, share)


def test_pooled_split_keeps_single_row_strata_in_training():
    rows = (pl.RowInfo("W", DieIndex(0, 0), 0),)
    train, test = pl.split_assignment(pl.Pooled8020(seed=0), rows)
    assert list(train) == [0]
    assert list(test) == []


# ---------------------------------------------------------------------------
# Spec validation


def test_spec_defaults_split_per_kind():
    assert isinstance(_cd2_spec().split, pl.ByWafer)
    assert isinstance(_cap_spec().split, pl.Pooled8020)


def test_spec_rejects_bad_combinations():
    with pytest.raises(ValueError, match="no models"):
        _cd2_spec(models=())
    with pytest.raises(ValueError, match="duplicate model"):
        _cd2_spec(models=(ModelSpec(kind=ModelKind.LINEAR),
                          ModelSpec(kind=ModelKind.LINEAR)))
    with pytest.raises(ValueError, match="need a structure"):
        _cap_spec(structure=None)
    with pytest.raises(ValueError, match="does not match"):
        _cap_spec(orientation=Orientation.VERTICAL)
    with pytest.raises(ValueError, match="take no structure"):
        _cd2_spec(structure=BA4_H)
    with pytest.raises(ValueError, match="test_fraction"):
        pl.Pooled8020(test_fraction=1.0)


# ---------------------------------------------------------------------------
# run_experiment


def test_run_experiment_cd2_reports_both_partitions(wafers):
    report = pl.run_experiment(_cd2_spec(), wafers)
    assert report.failures == ()
    cell = report.cell(ModelKind.LINEAR)
    assert cell.n_train == 3 * cell.n_test / 1  # three train wafers, one test
    parts = {p.partition for p in cell.predictions}
    assert parts == {"train", "test"}
    assert len(cell.predictions) == cell.n_train + cell.n_test
    assert 0.0 < cell.r2_test < 1.0
    assert report.metadata["split"] == "ByWafer"
    assert report.metadata["dropped_rows"] == "0"


def test_scaler_state_ignores_test_row_order(wafers):
    spec = _cd2_spec()
    base = pl.run_experiment(spec, wafers)

    rng = np.random.default_rng(5)
    shuffled = []
    for w in wafers:
        if w.wafer_id == "D10":
            order = rng.permutation(len(w.cdsem))
            shuffled.append(replace(w, cdsem=tuple(w.cdsem[i] for i in order)))
        else:
            shuffled.append(w)
    again = pl.run_experiment(spec, shuffled)

    assert again.metadata["scaler.scales"] == base.metadata["scaler.scales"]
    a, b = base.cell(ModelKind.LINEAR), again.cell(ModelKind.LINEAR)
    assert a.r2_train == b.r2_train
    assert a.r2_test == pytest.approx(b.r2_test, rel=1e-12)
    key = lambda p: (p.wafer_id, p.die_col, p.die_row, p.slot)
    assert sorted((p.y_true, p.y_pred) for p in a.predictions) == \
           sorted((p.y_true, p.y_pred) for p in b.predictions)


def test_cleaning_radius_ignores_test_row_values(wafers):
    spec = _cap_spec(split=pl.Pooled8020(seed=1))
    base = pl.run_experiment(spec, wafers)
    test_keys = {(p.wafer_id, p.slot)
                 for p in base.cells[0].predictions if p.partition == "test"}

    # Corrupt every held-out capacitance value; training rows untouched.
    corrupted = []
    for w in wafers:
        caps = tuple(
            replace(rec, value_ff=rec.value_ff * 3.0)
            if (w.wafer_id, i) in test_keys else rec
            for i, rec in enumerate(w.capacitance))
        corrupted.append(replace(w, capacitance=caps))
    again = pl.run_experiment(spec, corrupted)

    for key in ("scaler.scales", "clean.eps.D02", "clean.eps.D10"):
        assert again.metadata[key] == base.metadata[key], key


def test_cap_by_wafer_split_borrows_pooled_radius(wafers):
    spec = _cap_spec(split=pl.ByWafer(train_ids=("D02",), test_id="D10"))
    with pytest.warns(UserWarning, match="pooled training rows"):
        report = pl.run_experiment(spec, wafers)
    assert "clean.eps.D02" in report.metadata
    assert "clean.eps.D10" in report.metadata
    assert report.metadata["clean.eps.D10"] == report.metadata["clean.eps.D02"]


def test_cleaning_replaces_some_targets(wafers):
    cleaned = pl.run_experiment(_cap_spec(split=pl.Pooled8020(seed=0)), wafers)
    raw = pl.run_experiment(_cap_spec(split=pl.Pooled8020(seed=0),
                                      clean=False), wafers)
    outliers = sum(int(v) for k, v in cleaned.metadata.items()
                   if k.startswith("clean.outliers."))
    assert outliers > 0
    assert "leakage" in cleaned.metadata
    assert "leakage" not in raw.metadata
    y_clean = sorted(p.y_true for p in cleaned.cells[0].predictions)
    y_raw = sorted(p.y_true for p in raw.cells[0].predictions)
    assert y_clean != y_raw


def test_failed_model_lands_in_failures_not_cells(wafers):
    models = (ModelSpec(kind=ModelKind.LINEAR),
              ModelSpec(kind=ModelKind.SVR, svr=SvrSpec(max_iter=1)))
    report = pl.run_experiment(_cd2_spec(models=models), wafers)
    assert [c.model.kind for c in report.cells] == [ModelKind.LINEAR]
    assert len(report.failures) == 1
    name, message = report.failures[0]
    assert name == "SVR/seed0"
    assert "duality gap" in message


def test_run_experiment_rejects_empty_partition():
    wafer = _directional_wafer(1.0)
    spec = _cap_spec(structure=StructureId(Family.BA, 4, Orientation.HORIZONTAL),
                     split=pl.ByWafer(train_ids=("T1",), test_id="T2"))
    with pytest.raises(ValueError, match="T2"):
        pl.run_experiment(spec, [wafer])


# ---------------------------------------------------------------------------
# Reports and persistence


def test_metrics_recomputable_from_predictions_csv(wafers, tmp_path):
    report = pl.run_experiment(_cd2_spec(), wafers)
    cell = report.cells[0]
    path = tmp_path / "preds.csv"
    pl.predictions_to_csv(cell, path)
    metrics = pl.metrics_from_predictions(path)
    assert metrics["r2_train"] == cell.r2_train
    assert metrics["r2_test"] == cell.r2_test
    assert metrics["mse_test"] == cell.mse_test


def test_report_csv_round_trips_metrics(wafers, tmp_path):
    report = pl.run_experiment(_cd2_spec(), wafers)
    path = tmp_path / "report.csv"
    pl.report_to_csv(report, path)
    lines = path.read_text().splitlines()
    preamble = [ln for ln in lines if ln.startswith("#")]
    assert any(ln.startswith("# split=ByWafer") for ln in preamble)
    body = [ln for ln in lines if not ln.startswith("#")]
    rows = list(csv.DictReader(body))
    assert len(rows) == 1
    assert float(rows[0]["r2_test"]) == report.cells[0].r2_test
    assert rows[0]["model"] == "Linear"


def test_per_die_mae_is_the_mean_of_absolute_errors():
    preds = (
        pl.PredictionRow("D10", 1, 2, 0, "test", 10.0, 11.0),
        pl.PredictionRow("D10", 1, 2, 1, "test", 10.0, 8.0),
        pl.PredictionRow("D10", 3, 4, 2, "test", 5.0, 5.5),
        pl.PredictionRow("D10", 3, 4, 3, "train", 5.0, 9.0),
    )
    cell = pl.CellResult(
        model=ModelSpec(kind=ModelKind.LINEAR), kind=pl.ExperimentKind.CD2,
        dbo_step=DboStep.AEI, orientation=Orientation.HORIZONTAL,
        structure="", r2_train=0.0, r2_test=0.0, mse_test=0.0,
        n_train=1, n_test=3, predictions=preds, notes=())
    mae = cell.per_die_mae(wafer_id="D10")
    assert mae == {DieIndex(1, 2): 1.5, DieIndex(3, 4): 0.5}
    with pytest.raises(ValueError, match="no test predictions"):
        cell.per_die_mae(wafer_id="D99")


# ---------------------------------------------------------------------------
# Wafer maps


def test_render_widens_degenerate_color_range(tmp_path):
    errors = {DieIndex(c, 0): 1.0 for c in range(5)}
    res = pl.render_wafer_map(errors, tmp_path / "flat.svg")
    assert (res.vmin, res.vmax) == (0.5, 1.5)


def test_render_marks_hot_die_at_scale_top(tmp_path):
    errors = {DieIndex(c, 0): 0.1 for c in range(6)}
    errors[DieIndex(2, 0)] = 4.0
    res = pl.render_wafer_map(errors, tmp_path / "hot.svg")
    assert res.vmax == 4.0
    assert res.vmin == 0.1
    twin = list(csv.DictReader(open(res.csv_path)))
    assert len(twin) == 6
    back = {(int(r["die_col"]), int(r["die_row"])): float(r["value"])
            for r in twin}
    assert back == {(d.col, d.row): v for d, v in errors.items()}


def test_render_full_grid_has_no_overlapping_dies(tmp_path):
    grid = die_grid(149)
    rng = np.random.default_rng(0)
    errors = {d: float(v) for d, v in zip(grid, rng.uniform(0, 2, len(grid)))}
    res = pl.render_wafer_map(errors, tmp_path / "grid.svg")
    assert len(res.die_bounds) == 149
    bounds = res.die_bounds
    for i in range(len(bounds)):
        x0, y0, x1, y1 = bounds[i]
        for j in range(i + 1, len(bounds)):
            a0, b0, a1, b1 = bounds[j]
            assert not (x0 < a1 and a0 < x1 and y0 < b1 and b0 < y1)


def test_render_is_byte_deterministic(tmp_path):
    errors = {DieIndex(c, r): float(c + 2 * r)
              for c in range(4) for r in range(3)}
    first = pl.render_wafer_map(errors, tmp_path / "a.svg")
    second = pl.render_wafer_map(errors, tmp_path / "b.svg")
    svg_a = open(first.svg_path, "rb").read()
    svg_b = open(second.svg_path, "rb").read()
    assert svg_a == svg_b
    assert open(first.csv_path, "rb").read() == open(second.csv_path, "rb").read()


def test_render_rejects_empty_map(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        pl.render_wafer_map({}, tmp_path / "x.svg")
