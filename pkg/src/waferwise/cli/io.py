"""Dataset persistence: fixed CSV schemas, bundle layout, atomic writes.

A dataset bundle is a directory with one ``manifest.ini`` and one
subdirectory per wafer::

    out/
      manifest.ini
      D02/
        overlay_ADI.csv   overlay_AEI.csv   overlay_CMP.csv
        cdsem.csv         capacitance.csv
        true_overlay.csv  injected_failures.csv   (synthesis sidecars)

Schemas are fixed so ingesting real fab exports is a header-mapping
exercise; numbers are serialized with ``repr`` (shortest round-trip form),
which makes write-then-read reproduce every value exactly.  All writes go
through a temp file plus rename, so a crashed run never leaves a truncated
artifact behind.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import os
from pathlib import Path

from ..fabsim import SyntheticWafer
from ..model import (
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
    validate,
)

log = logging.getLogger("waferwise.cli")

OVERLAY_HEADER = ("wafer_id", "die_col", "die_row", "step", "site_index",
                  "ov_x_nm", "ov_y_nm")
CDSEM_HEADER = ("wafer_id", "die_col", "die_row", "target_x_um",
                "target_y_um", "family", "level", "orientation", "cd2_nm")
CAP_HEADER = ("wafer_id", "die_col", "die_row", "family", "level",
              "orientation", "instance", "cap_fF")
TRUE_OVERLAY_HEADER = ("wafer_id", "die_col", "die_row", "true_x_nm",
                       "true_y_nm")
FAILURES_HEADER = ("wafer_id", "record_index")

MANIFEST_NAME = "manifest.ini"


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def read_rows(path: Path, header: tuple[str, ...]) -> list[dict[str, str]]:
    """Read a CSV whose header must match the fixed schema exactly."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            found = tuple(next(reader))
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected header "
                             f"{','.join(header)}") from None
        if found != header:
            raise ValueError(f"{path}: expected columns {','.join(header)}, "
                             f"got {','.join(found)}")
        return [dict(zip(header, row)) for row in reader]


def overlay_filename(step: DboStep) -> str:
    return f"overlay_{step.value}.csv"


def write_wafer(wafer_dir: Path, dataset: WaferDataset) -> None:
    """Write one wafer's measurement CSVs under its bundle directory."""
    wafer_dir.mkdir(parents=True, exist_ok=True)
    for step in DboStep:
        rows = []
        for rec in dataset.overlay:
            if rec.step is not step:
                continue
            for i in range(N_OVERLAY_SITES):
                rows.append((dataset.wafer_id, rec.die.col, rec.die.row,
                             step.value, i, repr(float(rec.values_x[i])),
                             repr(float(rec.values_y[i]))))
        atomic_write_text(wafer_dir / overlay_filename(step),
                          csv_text(OVERLAY_HEADER, rows))
    cdsem_rows = [
        (dataset.wafer_id, rec.die.col, rec.die.row,
         repr(float(rec.target_x_um)), repr(float(rec.target_y_um)),
         rec.structure.family.value, rec.structure.level,
         rec.structure.orientation.value, repr(float(rec.cd2_nm)))
        for rec in dataset.cdsem]
    atomic_write_text(wafer_dir / "cdsem.csv",
                      csv_text(CDSEM_HEADER, cdsem_rows))
    cap_rows = [
        (dataset.wafer_id, rec.die.col, rec.die.row,
         rec.structure.family.value, rec.structure.level,
         rec.structure.orientation.value, rec.structure.instance,
         repr(float(rec.value_ff)))
        for rec in dataset.capacitance]
    atomic_write_text(wafer_dir / "capacitance.csv",
                      csv_text(CAP_HEADER, cap_rows))


def write_sidecars(wafer_dir: Path, synthetic: SyntheticWafer) -> None:
    """Hidden-truth files for oracle tests: the true per-die fingerprint and
    which capacitance records carry injected failures."""
    wafer_id = synthetic.dataset.wafer_id
    truth_rows = [
        (wafer_id, die.col, die.row, repr(float(tx)), repr(float(ty)))
        for die, (tx, ty) in sorted(synthetic.true_overlay.items(),
                                    key=lambda kv: (kv[0].row, kv[0].col))]
    atomic_write_text(wafer_dir / "true_overlay.csv",
                      csv_text(TRUE_OVERLAY_HEADER, truth_rows))
    fail_rows = [(wafer_id, i) for i in synthetic.injected_failures]
    atomic_write_text(wafer_dir / "injected_failures.csv",
                      csv_text(FAILURES_HEADER, fail_rows))


def _read_overlay(path: Path, wafer_id: str,
                  step: DboStep) -> list[OverlayRecord]:
    rows = read_rows(path, OVERLAY_HEADER)
    if len(rows) % N_OVERLAY_SITES != 0:
        raise ValueError(f"{path}: row count {len(rows)} is not a multiple "
                         f"of {N_OVERLAY_SITES} sites")
    records = []
    for start in range(0, len(rows), N_OVERLAY_SITES):
        chunk = rows[start:start + N_OVERLAY_SITES]
        die = DieIndex(int(chunk[0]["die_col"]), int(chunk[0]["die_row"]))
        for i, row in enumerate(chunk):
            if (row["wafer_id"] != wafer_id or row["step"] != step.value
                    or int(row["site_index"]) != i
                    or DieIndex(int(row["die_col"]),
                                int(row["die_row"])) != die):
                raise ValueError(
                    f"{path}: row {start + i + 2} breaks the per-die site "
                    f"sequence (expected wafer {wafer_id}, step "
                    f"{step.value}, die {die.col},{die.row}, site {i})")
        records.append(OverlayRecord(
            die=die, step=step,
            values_x=tuple(float(r["ov_x_nm"]) for r in chunk),
            values_y=tuple(float(r["ov_y_nm"]) for r in chunk)))
    return records


def read_wafer(wafer_dir: Path, wafer_id: str, recipe: Recipe,
               grid: tuple[DieIndex, ...], seed: int) -> WaferDataset:
    """Rebuild one wafer from its bundle directory."""
    overlay: list[OverlayRecord] = []
    for step in DboStep:
        path = wafer_dir / overlay_filename(step)
        if not path.exists():
            log.info("%s: no overlay at step %s", wafer_dir, step.value)
            continue
        overlay.extend(_read_overlay(path, wafer_id, step))
    cdsem = tuple(
        CdsemRecord(
            die=DieIndex(int(r["die_col"]), int(r["die_row"])),
            target_x_um=float(r["target_x_um"]),
            target_y_um=float(r["target_y_um"]),
            structure=StructureId(Family(r["family"]), int(r["level"]),
                                  Orientation(r["orientation"])),
            cd2_nm=float(r["cd2_nm"]))
        for r in read_rows(wafer_dir / "cdsem.csv", CDSEM_HEADER))
    capacitance = tuple(
        CapacitanceRecord(
            die=DieIndex(int(r["die_col"]), int(r["die_row"])),
            structure=StructureId(Family(r["family"]), int(r["level"]),
                                  Orientation(r["orientation"]),
                                  int(r["instance"])),
            value_ff=float(r["cap_fF"]))
        for r in read_rows(wafer_dir / "capacitance.csv", CAP_HEADER))
    return WaferDataset(wafer_id=wafer_id, recipe=recipe, grid=grid,
                        overlay=tuple(overlay), cdsem=cdsem,
                        capacitance=capacitance, seed=seed)


def manifest_text(scenario_seed: int, grid_dies: int, grid_width: int,
                  grid_height: int, cap_dies: int,
                  wafers: list[tuple[str, Recipe, int, bool]]) -> str:
    lines = ["[scenario]",
             f"seed = {scenario_seed}",
             f"grid_dies = {grid_dies}",
             f"grid_width = {grid_width}",
             f"grid_height = {grid_height}",
             f"cap_dies = {cap_dies}",
             ""]
    for wafer_id, recipe, seed, has_caps in wafers:
        lines.extend([f"[wafer:{wafer_id}]",
                      f"recipe = {recipe.value}",
                      f"seed = {seed}",
                      f"capacitance = {'true' if has_caps else 'false'}",
                      ""])
    return "\n".join(lines)


def read_manifest(path: Path):
    """Parse manifest.ini: scenario fields and wafer entries in file order."""
    parser = configparser.ConfigParser(interpolation=None)
    loaded = parser.read(path)
    if not loaded:
        raise ValueError(f"manifest not found: {path}")
    try:
        scen = parser["scenario"]
        info = {
            "seed": int(scen["seed"]),
            "grid_dies": int(scen["grid_dies"]),
            "grid_width": int(scen["grid_width"]),
            "grid_height": int(scen["grid_height"]),
            "cap_dies": int(scen["cap_dies"]),
        }
        wafers = []
        for section in parser.sections():
            if not section.startswith("wafer:"):
                continue
            entry = parser[section]
            wafers.append((section.split(":", 1)[1],
                           Recipe(entry["recipe"]), int(entry["seed"]),
                           entry["capacitance"] == "true"))
    except (KeyError, ValueError) as err:
        raise ValueError(f"{path}: bad manifest ({err})") from None
    if not wafers:
        raise ValueError(f"{path}: manifest lists no wafers")
    return info, wafers


def write_bundle(out: Path, info: dict, datasets: list[WaferDataset],
                 sidecars: list[SyntheticWafer] | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    entries = [(d.wafer_id, d.recipe, d.seed, bool(d.capacitance))
               for d in datasets]
    atomic_write_text(out / MANIFEST_NAME, manifest_text(
        info["seed"], info["grid_dies"], info["grid_width"],
        info["grid_height"], info["cap_dies"], entries))
    for i, dataset in enumerate(datasets):
        wafer_dir = out / dataset.wafer_id
        write_wafer(wafer_dir, dataset)
        if sidecars is not None:
            write_sidecars(wafer_dir, sidecars[i])


def read_bundle(data_dir: Path, check: bool = True) -> tuple[dict, list[WaferDataset]]:
    """Read every wafer of a bundle, in manifest order, and validate."""
    info, entries = read_manifest(data_dir / MANIFEST_NAME)
    grid = die_grid(info["grid_dies"], info["grid_width"],
                    info["grid_height"])
    datasets = []
    for wafer_id, recipe, seed, _ in entries:
        wafer_dir = data_dir / wafer_id
        if not wafer_dir.is_dir():
            raise ValueError(f"bundle is missing wafer directory "
                             f"{wafer_dir}")
        dataset = read_wafer(wafer_dir, wafer_id, recipe, grid, seed)
        if check:
            violations = validate(dataset)
            if violations:
                first = "; ".join(str(v) for v in violations[:3])
                raise ValueError(
                    f"wafer {wafer_id} fails validation with "
                    f"{len(violations)} violation(s): {first}")
        datasets.append(dataset)
    return info, datasets
