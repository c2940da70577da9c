"""Run configuration: INI file plus command-line overrides, canonicalized.

A run is described by three sections of plain ``key = value`` pairs:
``[synth]`` for the data generator, ``[experiment]`` for feature assembly,
split and models, ``[clean]`` for an explicit cleaning radius.  Every value
has a default, a config file overrides defaults, command-line flags override
the file.  The fully resolved result is echoed into the output directory as
``config.ini`` in a canonical form (sorted sections and keys, normalized
value spelling), so rerunning a command from its own echo is a fixed point
and produces byte-identical artifacts.

Input and output locations and ``--jobs`` are deliberately not part of the
echo: they are wiring, not semantics, and reruns must be able to vary them
(different output directory, different worker count) while reproducing the
same bytes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__
from ..clean import DbscanParams
from ..fabsim import CapacitanceModel, WaferSimConfig
from ..learn import ModelKind, ModelSpec
from ..model import DboStep, Family, Orientation, StructureId
from ..pipeline import ByWafer, ExperimentKind, ExperimentSpec, Pooled8020

DEFAULTS: dict[str, dict[str, str]] = {
    "synth": {
        "seed": "0",
        "grid_dies": "149",
        "grid_width": "13",
        "grid_height": "13",
        "cap_dies": "127",
        "fail_rate_base": "0.01",
        "cd_noise_sigma_nm": "0.28",
    },
    "experiment": {
        "kind": "cd2",
        "dbo_step": "aei",
        "orientation": "h",
        "family": "BA",
        "level": "4",
        "models": "linear,svr,random_forest,extra_trees",
        "model_seed": "0",
        "clean": "true",
        "split": "",
        "train_ids": "D02,D03,D11",
        "test_id": "D10",
        "split_seed": "0",
        "test_fraction": "0.2",
    },
    "clean": {
        "eps": "",
        "min_samples": "2",
    },
}

_KINDS = {"cd2": ExperimentKind.CD2,
          "capacitance": ExperimentKind.CAPACITANCE}
_STEPS = {"adi": DboStep.ADI, "aei": DboStep.AEI, "cmp": DboStep.CMP}
_ORIENTATIONS = {"h": Orientation.HORIZONTAL, "v": Orientation.VERTICAL}
_FAMILIES = {"AB": Family.AB, "BA": Family.BA}
_MODELS = {"linear": ModelKind.LINEAR, "svr": ModelKind.SVR,
           "random_forest": ModelKind.RANDOM_FOREST,
           "extra_trees": ModelKind.EXTRA_TREES}
_SPLITS = ("", "by_wafer", "pooled")
_BOOLS = {"true": True, "false": False, "1": True, "0": False,
          "yes": True, "no": False}


def _fail(section: str, key: str, value: str, expected: str) -> ValueError:
    return ValueError(f"invalid value for {section}.{key}: {value!r} "
                      f"(expected {expected})")


def _canon_int(section, key, value):
    try:
        return str(int(value))
    except ValueError:
        raise _fail(section, key, value, "an integer") from None


def _canon_float(section, key, value):
    try:
        return repr(float(value))
    except ValueError:
        raise _fail(section, key, value, "a number") from None


def _canon_bool(section, key, value):
    if value.strip().lower() not in _BOOLS:
        raise _fail(section, key, value, "true or false")
    return "true" if _BOOLS[value.strip().lower()] else "false"


def _canon_choice(choices, label):
    def canon(section, key, value):
        v = value.strip().lower()
        if v not in choices:
            raise _fail(section, key, value, label)
        return v
    return canon


def _canon_family(section, key, value):
    v = value.strip().upper()
    if v not in _FAMILIES:
        raise _fail(section, key, value, "AB or BA")
    return v


def _canon_models(section, key, value):
    names = [m.strip().lower() for m in value.split(",") if m.strip()]
    if not names:
        raise _fail(section, key, value, "a comma list of model names")
    for name in names:
        if name not in _MODELS:
            raise _fail(section, key, name,
                        "one of " + ", ".join(sorted(_MODELS)))
    return ",".join(names)


def _canon_ids(section, key, value):
    ids = [w.strip() for w in value.split(",") if w.strip()]
    if not ids:
        raise _fail(section, key, value, "a comma list of wafer ids")
    return ",".join(ids)


def _canon_id(section, key, value):
    v = value.strip()
    if not v:
        raise _fail(section, key, value, "a wafer id")
    return v


def _canon_optional_float(section, key, value):
    if not value.strip():
        return ""
    return _canon_float(section, key, value)


_CANON = {
    ("synth", "seed"): _canon_int,
    ("synth", "grid_dies"): _canon_int,
    ("synth", "grid_width"): _canon_int,
    ("synth", "grid_height"): _canon_int,
    ("synth", "cap_dies"): _canon_int,
    ("synth", "fail_rate_base"): _canon_float,
    ("synth", "cd_noise_sigma_nm"): _canon_float,
    ("experiment", "kind"): _canon_choice(_KINDS, "cd2 or capacitance"),
    ("experiment", "dbo_step"): _canon_choice(_STEPS, "adi, aei or cmp"),
    ("experiment", "orientation"): _canon_choice(_ORIENTATIONS, "h or v"),
    ("experiment", "family"): _canon_family,
    ("experiment", "level"): _canon_int,
    ("experiment", "models"): _canon_models,
    ("experiment", "model_seed"): _canon_int,
    ("experiment", "clean"): _canon_bool,
    ("experiment", "split"): _canon_choice(_SPLITS,
                                           "by_wafer, pooled, or empty"),
    ("experiment", "train_ids"): _canon_ids,
    ("experiment", "test_id"): _canon_id,
    ("experiment", "split_seed"): _canon_int,
    ("experiment", "test_fraction"): _canon_float,
    ("clean", "eps"): _canon_optional_float,
    ("clean", "min_samples"): _canon_int,
}


@dataclass
class RunConfig:
    """A resolved command invocation: canonical key-value semantics plus
    the wiring (paths, jobs) that stays out of the echo."""

    command: str
    values: dict[str, dict[str, str]] = field(default_factory=dict)
    out: Path | None = None
    data: Path | None = None
    model_path: Path | None = None
    predictions: Path | None = None
    wafer: str | None = None
    partition: str = "test"
    jobs: int = 1

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def get_int(self, section: str, key: str) -> int:
        return int(self.get(section, key))

    def get_float(self, section: str, key: str) -> float:
        return float(self.get(section, key))

    def get_bool(self, section: str, key: str) -> bool:
        return self.get(section, key) == "true"

    def sim_config(self) -> WaferSimConfig:
        return WaferSimConfig(
            grid_dies=self.get_int("synth", "grid_dies"),
            grid_width=self.get_int("synth", "grid_width"),
            grid_height=self.get_int("synth", "grid_height"),
            cap_dies=self.get_int("synth", "cap_dies"),
            cd_noise_sigma_nm=self.get_float("synth", "cd_noise_sigma_nm"),
            cap_model=CapacitanceModel(
                fail_rate_base=self.get_float("synth", "fail_rate_base")))

    def experiment_spec(self) -> ExperimentSpec:
        kind = _KINDS[self.get("experiment", "kind")]
        orientation = _ORIENTATIONS[self.get("experiment", "orientation")]
        seed = self.get_int("experiment", "model_seed")
        models = tuple(ModelSpec(kind=_MODELS[name], seed=seed)
                       for name in self.get("experiment", "models").split(","))
        split_name = self.get("experiment", "split")
        if split_name == "by_wafer":
            split = ByWafer(
                train_ids=tuple(self.get("experiment",
                                         "train_ids").split(",")),
                test_id=self.get("experiment", "test_id"))
        elif split_name == "pooled":
            split = Pooled8020(
                seed=self.get_int("experiment", "split_seed"),
                test_fraction=self.get_float("experiment", "test_fraction"))
        else:
            split = None  # per-kind default
        structure = None
        if kind is ExperimentKind.CAPACITANCE:
            structure = StructureId(
                _FAMILIES[self.get("experiment", "family")],
                self.get_int("experiment", "level"), orientation)
        return ExperimentSpec(kind=kind, dbo_step=_STEPS[self.get(
                                  "experiment", "dbo_step")],
                              orientation=orientation, structure=structure,
                              models=models, split=split,
                              clean=self.get_bool("experiment", "clean"))

    def dbscan_params(self) -> DbscanParams | None:
        eps = self.get("clean", "eps")
        if not eps:
            return None
        return DbscanParams(eps=float(eps),
                            min_samples=self.get_int("clean", "min_samples"))


def resolve(command: str, args) -> RunConfig:
    """Merge defaults, config file, and flags into a canonical RunConfig.

    Unknown sections or keys fail fast by name; every value is normalized
    through its canonicalizer so the echo is a fixed point.
    """
    values = {section: dict(kv) for section, kv in DEFAULTS.items()}

    config_path = getattr(args, "config", None)
    if config_path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        loaded = parser.read(config_path)
        if not loaded:
            raise ValueError(f"config file not found: {config_path}")
        for section in parser.sections():
            if section == "run":
                continue  # provenance stamp from a previous echo
            if section not in values:
                raise ValueError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in values[section]:
                    raise ValueError(f"unknown config key {section}.{key}")
                values[section][key] = value

    def override(section, key, value):
        if value is not None:
            values[section][key] = str(value)

    override("synth", "seed", getattr(args, "seed", None))
    override("experiment", "model_seed", getattr(args, "seed", None))
    override("experiment", "split_seed", getattr(args, "seed", None))
    override("synth", "grid_dies", getattr(args, "grid", None))
    override("experiment", "dbo_step", getattr(args, "dbo_step", None))
    override("clean", "eps", getattr(args, "eps_override", None))
    if getattr(args, "no_clean", None):
        values["experiment"]["clean"] = "false"

    for section, kv in values.items():
        for key, value in kv.items():
            kv[key] = _CANON[(section, key)](section, key, value)

    def path_of(name):
        raw = getattr(args, name, None)
        return Path(raw) if raw is not None else None

    return RunConfig(
        command=command, values=values, out=path_of("out"),
        data=path_of("data"), model_path=path_of("model"),
        predictions=path_of("predictions"),
        wafer=getattr(args, "wafer", None),
        partition=getattr(args, "partition", None) or "test",
        jobs=int(getattr(args, "jobs", None) or 1))


def echo_text(cfg: RunConfig) -> str:
    """Canonical INI text of the resolved run: what config.ini contains."""
    lines = ["[run]", f"command = {cfg.command}", f"version = {__version__}",
             ""]
    for section in sorted(cfg.values):
        lines.append(f"[{section}]")
        for key in sorted(cfg.values[section]):
            lines.append(f"{key} = {cfg.values[section][key]}")
        lines.append("")
    return "\n".join(lines)
