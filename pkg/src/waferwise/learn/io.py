"""Model files: gzip-compressed JSON, one model per file.

The document is self-describing: a format tag, a version, the full spec,
the scaler, the training fingerprint (n, d, column names), and the learned
parameters keyed by model kind. Floats serialize via repr and parse back to
the identical double, so a loaded model predicts bit-for-bit like the saved
one. The gzip timestamp is pinned to zero so equal models produce equal
bytes.
"""

from __future__ import annotations

import gzip
import json
from pathlib import Path

import numpy as np

from .base import (
    FittedModel,
    ForestSpec,
    ModelKind,
    ModelSpec,
    ScalerState,
    SvrSpec,
)
from .forest import ForestParams, Tree
from .linear import LinearParams
from .svr import SvrParams

__all__ = ["load_model", "save_model"]

_FORMAT = "waferwise-model"
_VERSION = 1


def _params_doc(model: FittedModel) -> dict:
    p = model.params
    if model.kind is ModelKind.LINEAR:
        return {"coef": list(p.coef), "intercept": p.intercept}
    if model.kind is ModelKind.SVR:
        return {"support": p.support.tolist(), "coef": list(p.coef),
                "b": p.b, "gamma": p.gamma}
    return {"trees": [{"feature": t.feature.tolist(),
                       "threshold": t.threshold.tolist(),
                       "left": t.left.tolist(),
                       "right": t.right.tolist(),
                       "value": t.value.tolist()} for t in p.trees]}


def save_model(model: FittedModel, path) -> None:
    doc = {
        "format": _FORMAT,
        "version": _VERSION,
        "kind": model.kind.value,
        "spec": {
            "kind": model.spec.kind.value,
            "seed": model.spec.seed,
            "svr": {"c": model.spec.svr.c, "epsilon": model.spec.svr.epsilon,
                    "gamma": model.spec.svr.gamma, "tol": model.spec.svr.tol,
                    "max_iter": model.spec.svr.max_iter},
            "forest": {"n_trees": model.spec.forest.n_trees,
                       "min_samples_split": model.spec.forest.min_samples_split,
                       "max_features": model.spec.forest.max_features,
                       "bootstrap": model.spec.forest.bootstrap},
        },
        "scaler": None if model.scaler is None else {
            "scales": list(model.scaler.scales),
            "passthrough": list(model.scaler.passthrough)},
        "n_train": model.n_train,
        "d": model.d,
        "col_names": list(model.col_names),
        "notes": list(model.notes),
        "params": _params_doc(model),
    }
    payload = json.dumps(doc, separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
            gz.write(payload)


def _load_params(kind: ModelKind, doc: dict, d: int):
    if kind is ModelKind.LINEAR:
        return LinearParams(coef=tuple(doc["coef"]),
                            intercept=float(doc["intercept"]))
    if kind is ModelKind.SVR:
        support = np.asarray(doc["support"], dtype=float).reshape(-1, d)
        return SvrParams(support=support, coef=tuple(doc["coef"]),
                         b=float(doc["b"]), gamma=float(doc["gamma"]))
    trees = tuple(
        Tree(feature=np.asarray(t["feature"], dtype=np.int64),
             threshold=np.asarray(t["threshold"], dtype=float),
             left=np.asarray(t["left"], dtype=np.int64),
             right=np.asarray(t["right"], dtype=np.int64),
             value=np.asarray(t["value"], dtype=float))
        for t in doc["trees"])
    return ForestParams(trees=trees)


def load_model(path) -> FittedModel:
    with gzip.open(Path(path), "rt", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("format") != _FORMAT:
        raise ValueError(f"{path} is not a model file")
    if doc.get("version") != _VERSION:
        raise ValueError(f"unsupported model file version {doc.get('version')}")
    kind = ModelKind(doc["kind"])
    sd = doc["spec"]
    spec = ModelSpec(kind=ModelKind(sd["kind"]), seed=sd["seed"],
                     svr=SvrSpec(**sd["svr"]), forest=ForestSpec(**sd["forest"]))
    scaler = None
    if doc["scaler"] is not None:
        scaler = ScalerState(scales=tuple(doc["scaler"]["scales"]),
                             passthrough=tuple(doc["scaler"]["passthrough"]))
    return FittedModel(kind=kind, spec=spec, scaler=scaler,
                       n_train=int(doc["n_train"]), d=int(doc["d"]),
                       col_names=tuple(doc["col_names"]),
                       params=_load_params(kind, doc["params"], int(doc["d"])),
                       notes=tuple(doc["notes"]))
