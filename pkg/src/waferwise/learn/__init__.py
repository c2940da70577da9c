"""From-scratch regression stack: unit-variance scaling, fit metrics, and
four regressors (least squares, RBF support vector regression, bagged
best-split trees, random-threshold trees) behind one fit/predict/save API."""

from .base import (
    FeatureMatrix,
    FittedModel,
    ForestSpec,
    ModelKind,
    ModelSpec,
    ScalerState,
    SvrSpec,
    apply_scaler,
    fit_scaler,
    mse,
    predict,
    r2,
)
from .forest import ForestParams, Tree, fit_forest
from .io import load_model, save_model
from .linear import LinearParams, fit_linear
from .svr import SvrParams, fit_svr

__all__ = [
    "FeatureMatrix",
    "FittedModel",
    "ForestParams",
    "ForestSpec",
    "LinearParams",
    "ModelKind",
    "ModelSpec",
    "ScalerState",
    "SvrParams",
    "SvrSpec",
    "Tree",
    "apply_scaler",
    "fit_forest",
    "fit_linear",
    "fit_model",
    "fit_scaler",
    "fit_svr",
    "load_model",
    "mse",
    "predict",
    "r2",
    "save_model",
]


def fit_model(X, y, spec: ModelSpec, *, scale: bool = True,
              jobs: int = 1) -> FittedModel:
    """Fit any model kind, by default behind a freshly fitted scaler."""
    scaler = fit_scaler(X) if scale else None
    if spec.kind is ModelKind.LINEAR:
        return fit_linear(X, y, scaler=scaler, seed=spec.seed)
    if spec.kind is ModelKind.SVR:
        return fit_svr(X, y, spec, scaler=scaler)
    return fit_forest(X, y, spec, scaler=scaler, jobs=jobs)
