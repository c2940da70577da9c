"""Command-line entry point.

Verbs::

    waferwise synth   --out DIR                  generate a wafer bundle
    waferwise clean   --data DIR --out DIR       flag/replace capacitance outliers
    waferwise train   --data DIR --out DIR       fit models, save them
    waferwise eval    --data DIR --out DIR       fit + score, full report
    waferwise predict --data DIR --model F --out DIR   apply a saved model
    waferwise render  --predictions F --out DIR  per-die error maps (SVG + CSV)

Every command echoes its fully resolved configuration to ``<out>/config.ini``;
rerunning the same verb with ``--config <that file>`` reproduces the
artifacts byte for byte, regardless of ``--jobs``.  Selection flags on
``render`` (``--predictions``, ``--wafer``, ``--partition``) are wiring like
the paths and must be repeated on a rerun.

Output artifacts are written through a temp file and an atomic rename, so an
interrupted run never leaves a half-written file under a final name.  stdout
carries one summary line per result; diagnostics go to stderr, with
verbosity picked up from the ``WAFERWISE_LOG`` environment variable
(``debug``/``info``/``warning``/``error``).  Failures print a single
``error: <reason>`` line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..clean import clean_dataset
from ..fabsim import default_scenario, generate_scenario
from ..learn import load_model, predict, save_model
from ..model import DieIndex
from ..pipeline import (
    PREDICTIONS_HEADER,
    ExperimentKind,
    PredictionRow,
    assemble_cap_features,
    assemble_cd2_features,
    predictions_to_csv,
    render_wafer_map,
    report_to_csv,
    run_experiment,
)
from .config import RunConfig, echo_text, resolve
from .io import atomic_write_text, csv_text, read_bundle, read_rows, write_bundle

log = logging.getLogger("waferwise.cli")

CLEAN_REPORT_HEADER = ("wafer_id", "family", "level", "orientation",
                       "eps", "weak_knee", "n_outliers", "n_replaced")

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO,
               "warning": logging.WARNING, "error": logging.ERROR}


def _need(value, message: str):
    if value is None:
        raise ValueError(message)
    return value


def _replace_into(path: Path, write_fn) -> None:
    """Run a writer against a temp name, then rename into place."""
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


def _echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.ini", echo_text(cfg))


def cmd_synth(cfg: RunConfig) -> int:
    out = _need(cfg.out, "synth needs --out DIR")
    sim = cfg.sim_config()
    scenario = default_scenario(cfg.get_int("synth", "seed"), sim)
    wafers = generate_scenario(scenario, jobs=cfg.jobs)
    info = {"seed": scenario.seed, "grid_dies": sim.grid_dies,
            "grid_width": sim.grid_width, "grid_height": sim.grid_height,
            "cap_dies": sim.cap_dies}
    write_bundle(out, info, [w.dataset for w in wafers], sidecars=wafers)
    _echo(cfg, out)
    print(f"synth: {len(wafers)} wafers, {sim.grid_dies} dies each, "
          f"seed {scenario.seed} -> {out}")
    return 0


def cmd_clean(cfg: RunConfig) -> int:
    data = _need(cfg.data, "clean needs --data DIR")
    out = _need(cfg.out, "clean needs --out DIR")
    info, datasets = read_bundle(data)
    params = cfg.dbscan_params()
    cleaned_sets = []
    report_rows = []
    n_outliers = n_replaced = 0
    for wafer in datasets:
        if not wafer.capacitance:
            cleaned_sets.append(wafer)
            continue
        cleaned, reports = clean_dataset(wafer, params)
        cleaned_sets.append(cleaned)
        # clean_dataset processes groups in sorted (family, level,
        # orientation) order; rebuild the same keys to label its reports.
        groups = sorted(
            {(r.structure.family, r.structure.level, r.structure.orientation)
             for r in wafer.capacitance},
            key=lambda g: (g[0].value, g[1], g[2].value))
        for (family, level, orientation), rep in zip(groups, reports):
            report_rows.append((wafer.wafer_id, family.value, level,
                                orientation.value, repr(rep.eps_used),
                                "true" if rep.weak_knee else "false",
                                rep.n_outliers, len(rep.replaced)))
            n_outliers += rep.n_outliers
            n_replaced += len(rep.replaced)
    write_bundle(out, info, cleaned_sets)
    atomic_write_text(out / "clean_report.csv",
                      csv_text(CLEAN_REPORT_HEADER, report_rows))
    _echo(cfg, out)
    print(f"clean: flagged {n_outliers} outliers, replaced {n_replaced} "
          f"values -> {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    data = _need(cfg.data, "train needs --data DIR")
    out = _need(cfg.out, "train needs --out DIR")
    _, datasets = read_bundle(data)
    report = run_experiment(cfg.experiment_spec(), datasets, jobs=cfg.jobs)
    out.mkdir(parents=True, exist_ok=True)
    for cell in report.cells:
        name = f"model_{cell.model.kind.value}.json.gz"
        _replace_into(out / name, lambda p, c=cell: save_model(c.fitted, p))
        print(f"train: {cell.model.kind.value} r2_train = "
              f"{cell.r2_train:.3f} -> {name}")
    for name, message in report.failures:
        print(f"train: {name} failed ({message})")
    _replace_into(out / "report.csv", lambda p: report_to_csv(report, p))
    _echo(cfg, out)
    if not report.cells:
        raise RuntimeError(
            "every model failed: "
            + "; ".join(f"{n}: {m}" for n, m in report.failures))
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    data = _need(cfg.data, "eval needs --data DIR")
    out = _need(cfg.out, "eval needs --out DIR")
    _, datasets = read_bundle(data)
    report = run_experiment(cfg.experiment_spec(), datasets, jobs=cfg.jobs)
    out.mkdir(parents=True, exist_ok=True)
    _replace_into(out / "report.csv", lambda p: report_to_csv(report, p))
    for cell in report.cells:
        name = (f"predictions_{cell.model.kind.value}"
                f"_seed{cell.model.seed}.csv")
        _replace_into(out / name, lambda p, c=cell: predictions_to_csv(c, p))
        print(f"eval: {cell.model.kind.value}/seed{cell.model.seed} "
              f"r2_test = {cell.r2_test:.3f} mse_test = {cell.mse_test:.4g}")
    for name, message in report.failures:
        print(f"eval: {name} failed ({message})")
    _echo(cfg, out)
    if not report.cells:
        raise RuntimeError(
            "every model failed: "
            + "; ".join(f"{n}: {m}" for n, m in report.failures))
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    data = _need(cfg.data, "predict needs --data DIR")
    model_path = _need(cfg.model_path, "predict needs --model FILE")
    out = _need(cfg.out, "predict needs --out DIR")
    model = load_model(model_path)
    _, datasets = read_bundle(data)
    spec = cfg.experiment_spec()
    if spec.kind is ExperimentKind.CD2:
        asm = assemble_cd2_features(datasets, spec.dbo_step, spec.orientation)
    else:
        asm = assemble_cap_features(datasets, spec.dbo_step,
                                    spec.orientation, spec.structure)
    y_pred = predict(model, asm.x.values)
    rows = [(r.wafer_id, r.die.col, r.die.row, r.slot, "all",
             repr(float(asm.y[i])), repr(float(y_pred[i])))
            for i, r in enumerate(asm.rows)]
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "predictions.csv",
                      csv_text(PREDICTIONS_HEADER, rows))
    _echo(cfg, out)
    print(f"predict: {len(rows)} predictions -> {out / 'predictions.csv'}")
    return 0


def cmd_render(cfg: RunConfig) -> int:
    pred_path = _need(cfg.predictions, "render needs --predictions FILE")
    out = _need(cfg.out, "render needs --out DIR")
    rows = read_rows(Path(pred_path), PREDICTIONS_HEADER)
    part = cfg.partition
    keep = [r for r in rows if part == "all" or r["partition"] == part]
    if cfg.wafer is not None:
        keep = [r for r in keep if r["wafer"] == cfg.wafer]
    if not keep:
        raise ValueError(
            f"no predictions match partition {part!r}"
            + (f" and wafer {cfg.wafer!r}" if cfg.wafer else ""))
    units = "nm" if cfg.get("experiment", "kind") == "cd2" else "fF"
    by_wafer: dict[str, dict[DieIndex, list[float]]] = {}
    for r in keep:
        die = DieIndex(int(r["die_col"]), int(r["die_row"]))
        err = abs(float(r["y_true"]) - float(r["y_pred"]))
        by_wafer.setdefault(r["wafer"], {}).setdefault(die, []).append(err)
    out.mkdir(parents=True, exist_ok=True)
    for wafer_id in sorted(by_wafer):
        errors = {die: float(np.mean(v))
                  for die, v in by_wafer[wafer_id].items()}
        # render to temp names, then rename: render_wafer_map rewrites any
        # non-.svg suffix, so the temp name must itself end in .svg.
        result = render_wafer_map(
            errors, out / f"tmp_map_{wafer_id}.svg",
            title=f"wafer {wafer_id}: per-die mean |error| ({part})",
            units=units)
        svg = out / f"wafer_map_{wafer_id}.svg"
        os.replace(result.svg_path, svg)
        os.replace(result.csv_path, out / f"wafer_map_{wafer_id}.csv")
        print(f"render: wafer {wafer_id} ({len(errors)} dies) -> {svg}")
    _echo(cfg, out)
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "clean": cmd_clean,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="INI file; flags override it")
    common.add_argument("--seed", type=int, metavar="N",
                        help="set synth, model and split seeds at once")
    common.add_argument("--out", required=True, metavar="DIR",
                        help="output directory")
    common.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="worker count; never changes results")
    common.add_argument("--dbo-step", choices=("adi", "aei", "cmp"),
                        help="which overlay step feeds the features")
    common.add_argument("--no-clean", action="store_const", const=True,
                        default=None,
                        help="skip capacitance outlier cleaning")
    common.add_argument("--eps-override", type=float, metavar="EPS",
                        help="fixed cleaning radius instead of the knee")

    parser = argparse.ArgumentParser(
        prog="waferwise",
        description="synthetic double-patterning wafers and overlay-driven "
                    "prediction of space CD and capacitance")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    sub.add_parser("synth", parents=[common],
                   help="generate a wafer data bundle") \
       .add_argument("--grid", type=int, metavar="N",
                     help="dies per wafer")
    for verb, text in (("clean", "flag and replace capacitance outliers"),
                       ("train", "fit models and save them"),
                       ("eval", "fit and score models, write a report")):
        sp = sub.add_parser(verb, parents=[common], help=text)
        sp.add_argument("--data", required=True, metavar="DIR",
                        help="input bundle directory")
    sp = sub.add_parser("predict", parents=[common],
                        help="apply a saved model to a bundle")
    sp.add_argument("--data", required=True, metavar="DIR",
                    help="input bundle directory")
    sp.add_argument("--model", required=True, metavar="FILE",
                    help="saved model file")
    sp = sub.add_parser("render", parents=[common],
                        help="draw per-die error maps from predictions")
    sp.add_argument("--predictions", required=True, metavar="FILE",
                    help="predictions CSV")
    sp.add_argument("--wafer", metavar="ID", help="restrict to one wafer")
    sp.add_argument("--partition", choices=("test", "train", "all"),
                    default="test", help="which rows to map")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("WAFERWISE_LOG", "warning").strip().lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.WARNING),
                        stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return _COMMANDS[args.command](cfg)
    except (ValueError, RuntimeError, OSError, configparser.Error) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
