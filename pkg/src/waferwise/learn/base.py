"""Shared pieces of the regression stack: feature matrices, the unit-variance
scaler, fit metrics, and the fitted-model container.

Conventions, fixed here once:

- Scaling divides each column by its population standard deviation and does
  not subtract the mean. Metrics and tree models do not care; the linear and
  SVR models carry an intercept that absorbs the uncentered mean.
- r2 uses the squared-error denominator sum((y - mean(y))^2), so a predictor
  stuck at the target mean scores exactly 0 and 1 is the maximum.
- Zero-variance feature columns pass through unscaled with a warning; the
  scaler records which columns were degenerate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "FeatureMatrix",
    "FittedModel",
    "ForestSpec",
    "ModelKind",
    "ModelSpec",
    "ScalerState",
    "SvrSpec",
    "apply_scaler",
    "as_matrix",
    "fit_scaler",
    "mse",
    "predict",
    "r2",
]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """A model input: n x d array of finite reals plus one name per column."""

    values: np.ndarray
    col_names: tuple[str, ...]

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got {arr.ndim}-D")
        if not np.isfinite(arr).all():
            raise ValueError("feature matrix must be finite")
        if len(self.col_names) != arr.shape[1]:
            raise ValueError(
                f"{len(self.col_names)} column names for {arr.shape[1]} columns")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "col_names", tuple(self.col_names))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def as_matrix(X) -> tuple[np.ndarray, tuple[str, ...]]:
    """Coerce a FeatureMatrix or 2-D array-like to (array, column names)."""
    if isinstance(X, FeatureMatrix):
        return X.values, X.col_names
    arr = np.asarray(X, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got {arr.ndim}-D")
    if not np.isfinite(arr).all():
        raise ValueError("feature matrix must be finite")
    return arr, tuple(f"x{j}" for j in range(arr.shape[1]))


def _as_target(y, n: int) -> np.ndarray:
    arr = np.asarray(y, dtype=float)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ValueError(f"target must be a length-{n} vector")
    if not np.isfinite(arr).all():
        raise ValueError("target must be finite")
    return arr


# --- Eq.-5 scaling ----------------------------------------------------------


@dataclass(frozen=True)
class ScalerState:
    """Per-column divisors; passthrough lists columns left unscaled."""

    scales: tuple[float, ...]
    passthrough: tuple[int, ...] = ()


def fit_scaler(X) -> ScalerState:
    """Per-column population standard deviation of the training data."""
    arr, names = as_matrix(X)
    if arr.shape[0] < 2:
        raise ValueError("scaler needs at least 2 rows")
    s = arr.std(axis=0)
    passthrough = tuple(int(j) for j in np.flatnonzero(s == 0.0))
    for j in passthrough:
        warnings.warn(f"column {names[j]!r} has zero variance; passed through "
                      f"unscaled", stacklevel=2)
    scales = np.where(s == 0.0, 1.0, s)
    return ScalerState(scales=tuple(float(v) for v in scales),
                       passthrough=passthrough)


def apply_scaler(state: ScalerState, X) -> np.ndarray:
    """Divide columns by the stored divisors (no centering)."""
    arr, _ = as_matrix(X)
    if arr.shape[1] != len(state.scales):
        raise ValueError(f"scaler fitted on {len(state.scales)} columns, "
                         f"got {arr.shape[1]}")
    return arr / np.asarray(state.scales)


# --- fit metrics ------------------------------------------------------------


def _metric_args(y, f) -> tuple[np.ndarray, np.ndarray]:
    ya = np.asarray(y, dtype=float)
    fa = np.asarray(f, dtype=float)
    if ya.ndim != 1 or fa.ndim != 1 or ya.shape != fa.shape:
        raise ValueError("y and f must be 1-D vectors of equal length")
    if ya.shape[0] < 2:
        raise ValueError("metrics need at least 2 points")
    if not (np.isfinite(ya).all() and np.isfinite(fa).all()):
        raise ValueError("metric inputs must be finite")
    return ya, fa


def mse(y, f) -> float:
    """Mean squared prediction error."""
    ya, fa = _metric_args(y, f)
    return float(np.mean((ya - fa) ** 2))


def r2(y, f) -> float:
    """Coefficient of determination: 1 - SSres/SStot.

    0 means no better than predicting mean(y); negative means worse.
    """
    ya, fa = _metric_args(y, f)
    ss_res = float(((ya - fa) ** 2).sum())
    ss_tot = float(((ya - ya.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("r2 undefined for a constant target")
    return 1.0 - ss_res / ss_tot


# --- model specs and the fitted container -----------------------------------


class ModelKind(str, Enum):
    LINEAR = "Linear"
    SVR = "SVR"
    RANDOM_FOREST = "RandomForest"
    EXTRA_TREES = "ExtraTrees"


@dataclass(frozen=True)
class SvrSpec:
    """RBF support vector regression hyperparameters.

    gamma None means 1/(d * var(X)) at fit time, computed over all entries
    of the (scaled) training matrix.
    """

    c: float = 3.0
    epsilon: float = 0.07
    gamma: float | None = None
    tol: float = 1e-3
    max_iter: int = 2_000_000

    def __post_init__(self) -> None:
        if not self.c > 0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class ForestSpec:
    """Tree-ensemble hyperparameters.

    max_features None means d // 3 (floored to 1) for RandomForest and all d
    for ExtraTrees. bootstrap None follows the kind: resample for
    RandomForest, full sample for ExtraTrees.
    """

    n_trees: int = 60
    min_samples_split: int = 2
    max_features: int | None = None
    bootstrap: bool | None = None

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2, "
                             f"got {self.min_samples_split}")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1 when given")


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    svr: SvrSpec = field(default_factory=SvrSpec)
    forest: ForestSpec = field(default_factory=ForestSpec)
    seed: int = 0


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A trained regressor plus everything needed to reuse it: the scaler it
    was fitted behind (None for raw features), the training fingerprint, and
    notes recording convention-filled hyperparameters."""

    kind: ModelKind
    spec: ModelSpec
    scaler: ScalerState | None
    n_train: int
    d: int
    col_names: tuple[str, ...]
    params: object
    notes: tuple[str, ...] = ()


def predict(model: FittedModel, X) -> np.ndarray:
    """Evaluate a fitted model; rejects inputs of the wrong width."""
    arr, _ = as_matrix(X)
    if arr.shape[1] != model.d:
        raise ValueError(
            f"model expects {model.d} features, got {arr.shape[1]}")
    z = apply_scaler(model.scaler, arr) if model.scaler is not None else arr
    return model.params.predict(z)
