"""Ordinary least squares via an orthogonal factorization (SVD under
np.linalg.lstsq), with a minimum-norm fallback on rank-deficient inputs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .base import (
    FittedModel,
    ModelKind,
    ModelSpec,
    ScalerState,
    _as_target,
    apply_scaler,
    as_matrix,
)

__all__ = ["LinearParams", "fit_linear"]


@dataclass(frozen=True)
class LinearParams:
    coef: tuple[float, ...]
    intercept: float

    def predict(self, z: np.ndarray) -> np.ndarray:
        return z @ np.asarray(self.coef) + self.intercept


def fit_linear(X, y, *, scaler: ScalerState | None = None,
               seed: int = 0) -> FittedModel:
    """Least-squares fit of y = X b + intercept.

    Requires n > d. A rank-deficient design matrix still fits (the
    minimum-norm solution) but warns, since the coefficients are then not
    individually meaningful.
    """
    arr, names = as_matrix(X)
    yv = _as_target(y, arr.shape[0])
    n, d = arr.shape
    if n <= d:
        raise ValueError(f"need more samples than features, got n={n} d={d}")
    z = apply_scaler(scaler, arr) if scaler is not None else arr
    design = np.c_[z, np.ones(n)]
    coef, _, rank, _ = np.linalg.lstsq(design, yv, rcond=None)
    if rank < d + 1:
        warnings.warn(f"design matrix rank {rank} < {d + 1}; returning the "
                      f"minimum-norm solution", stacklevel=2)
    params = LinearParams(coef=tuple(float(c) for c in coef[:d]),
                          intercept=float(coef[d]))
    return FittedModel(kind=ModelKind.LINEAR,
                       spec=ModelSpec(kind=ModelKind.LINEAR, seed=seed),
                       scaler=scaler, n_train=n, d=d, col_names=names,
                       params=params)
