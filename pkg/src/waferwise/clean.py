"""Density-based capacitance outlier cleaning.

Failed test structures (shorts, opens) produce capacitance values far from
the population of healthy parts, so they show up as low-density points when
each record is embedded as (capacitance, die column, die row).  This module
provides the pieces of that cleaning step:

* ``dbscan``           -- deterministic density clustering, label -1 = outlier
* ``knee_eps``         -- data-driven choice of the dbscan radius from the
                          sorted k-th neighbor distance curve
* ``clean_capacitance``-- flag-and-replace for one structure group
* ``clean_dataset``    -- the same applied across every group of a wafer

Conventions, fixed once so results are reproducible:

* Neighborhood counts include the point itself, so ``min_samples=2`` means
  "at least one other point within eps".  ``kth_neighbor_distances`` follows
  the same convention: the point is its own 1st neighbor, hence k=2 returns
  the distance to the nearest other point, which is exactly the quantity a
  core test with min_samples=2 thresholds.
* Distances are Euclidean on per-coordinate unit-variance scaled features;
  scaling stops integer die coordinates from dominating capacitance.
* Cluster labels are canonical: clusters are numbered by their lowest member
  index, border points attach to their nearest core (ties to the lowest core
  index), so the labeling is a pure function of the point multiset.
* The knee is the index of maximum second difference of the 5-sample moving
  average of the sorted distance curve; the moving average is only taken
  where the window fits entirely inside the curve, because padding schemes
  manufacture curvature at the ends.  Exact ties (a jump smeared across the
  window produces a flat curvature plateau) resolve to the middle of the
  plateau, which recovers the joint of an ideal two-segment curve.  The full
  curve is always reported so a human can override eps downstream.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .model import CapacitanceRecord, StructureId, WaferDataset

# A knee is reported as weak when the curve above it is, on average, less
# than this factor above the curve below it.  Calibrated on simulations:
# tight blobs with 5% far outliers score >= 12, structureless uniform point
# sets score <= 8.5.
WEAK_KNEE_RATIO = 10.0

KNEE_WINDOW = 5

_POLICY_DIE = "die-mean"
_POLICY_WAFER = "wafer-mean"


@dataclass(frozen=True)
class DbscanParams:
    """Clustering radius and the neighborhood count for core status."""

    eps: float
    min_samples: int = 2

    def __post_init__(self) -> None:
        if not (np.isfinite(self.eps) and self.eps > 0):
            raise ValueError(f"eps must be finite and > 0, got {self.eps!r}")
        if self.min_samples < 2:
            raise ValueError(
                f"min_samples must be >= 2, got {self.min_samples}")


@dataclass(frozen=True)
class KneeResult:
    """Knee location on the sorted k-th neighbor distance curve.

    ``curve`` is the sorted distance curve itself, ``smoothed`` its moving
    average (same indexing, edges omitted), ``strength`` the above/below
    mean ratio used for the weak-knee diagnostic.
    """

    eps: float
    knee_index: int
    curve: tuple[float, ...]
    smoothed: tuple[float, ...]
    strength: float
    weak: bool


@dataclass(frozen=True)
class Replacement:
    """One replaced record: index into the wafer's capacitance tuple."""

    index: int
    old_value: float
    new_value: float
    policy: str


@dataclass(frozen=True)
class CleanReport:
    n_outliers: int
    replaced: tuple[Replacement, ...]
    eps_used: float
    knee_curve: tuple[float, ...]
    scales: tuple[float, ...]
    weak_knee: bool


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("points must be a non-empty list of feature vectors")
    if not np.isfinite(arr).all():
        raise ValueError("points must be finite")
    return arr


def _sq_distances(arr: np.ndarray) -> np.ndarray:
    gram = arr @ arr.T
    sq = np.diag(gram)[:, None] - 2.0 * gram + np.diag(gram)[None, :]
    np.maximum(sq, 0.0, out=sq)
    return sq


def kth_neighbor_distances(points, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbor, the point
    itself counting as the 1st.  k=2 is therefore the nearest other point."""
    arr = _as_points(points)
    if k < 1 or k > arr.shape[0]:
        raise ValueError(f"k must be in 1..{arr.shape[0]}, got {k}")
    sq = _sq_distances(arr)
    part = np.partition(sq, k - 1, axis=1)[:, k - 1]
    return np.sqrt(part)


def _max_curvature_index(d: np.ndarray, window: int) -> int:
    """Index of maximum second difference of the moving-averaged curve.

    The average is only taken where the window fits entirely inside the
    curve (padding schemes manufacture curvature at the ends).  A jump
    smeared across the window produces a flat curvature plateau; exact ties
    resolve to the middle of the plateau, which recovers the joint of an
    ideal two-segment curve.
    """
    n = d.size
    w = min(window, n - 2)
    if w % 2 == 0:
        w -= 1
    w = max(w, 1)
    pad = w // 2
    sm = np.convolve(d, np.ones(w) / w, mode="valid")
    curv = sm[2:] - 2.0 * sm[1:-1] + sm[:-2]
    cmax = float(curv.max())
    tol = 1e-9 * max(abs(cmax), 1e-300)
    ties = np.flatnonzero(curv >= cmax - tol)
    return int(ties[len(ties) // 2]) + pad + 1


def _strength(d: np.ndarray, idx: int) -> float:
    below = float(d[: idx + 1].mean())
    return float(d[idx:].mean()) / below if below > 0 else 0.0


def knee_from_distances(distances, window: int = KNEE_WINDOW) -> KneeResult:
    """Locate the knee of a distance curve (sorted ascending internally).

    The maximum second difference finds the single largest bend, which for
    a curve with a spread-out upper band (several loosely spaced far points)
    sits at the top of the band rather than at the transition into it.  So
    the bend search repeats on the sub-curve below each strong knee until
    the remainder is knee-free, and the lowest strong knee wins; a curve
    with one bend is unaffected because the segment below its knee has no
    strong knee of its own.  Strength is the mean of the curve above the
    knee over the mean below; below WEAK_KNEE_RATIO a knee is considered
    weak and the descent stops.
    """
    d = np.sort(np.asarray(distances, dtype=float))
    n = d.size
    if n < 3:
        raise ValueError(f"need at least 3 distances, got {n}")
    idx = _max_curvature_index(d, window)
    weak = _strength(d, idx) < WEAK_KNEE_RATIO
    if not weak:
        stop = idx + 1
        while stop >= 3:
            lower = _max_curvature_index(d[:stop], window)
            if _strength(d[:stop], lower) < WEAK_KNEE_RATIO:
                break
            idx = lower
            stop = idx + 1
    strength = _strength(d, idx)
    if weak:
        warnings.warn(
            f"weak knee: above/below ratio {strength:.2f} < "
            f"{WEAK_KNEE_RATIO}; consider overriding eps",
            stacklevel=2)
    w = min(window, n - 2)
    if w % 2 == 0:
        w -= 1
    w = max(w, 1)
    sm = np.convolve(d, np.ones(w) / w, mode="valid")
    return KneeResult(eps=float(d[idx]), knee_index=idx,
                      curve=tuple(float(v) for v in d),
                      smoothed=tuple(float(v) for v in sm),
                      strength=strength, weak=weak)


def knee_eps(points, k: int = 2, *, window: int = KNEE_WINDOW) -> KneeResult:
    """Knee of the sorted k-th neighbor distance curve of a point set."""
    arr = _as_points(points)
    if arr.shape[0] < k + 1:
        raise ValueError(
            f"need at least {k + 1} points for k={k}, got {arr.shape[0]}")
    return knee_from_distances(kth_neighbor_distances(arr, k), window=window)


class _UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def dbscan(points, params: DbscanParams) -> np.ndarray:
    """Density clustering.  Returns one integer label per point; -1 marks
    outliers.  Core points have >= min_samples points (themselves included)
    within eps; clusters are connected components of cores plus the non-core
    points within eps of a core.  Labels are canonical (see module docstring).
    """
    arr = _as_points(points)
    n = arr.shape[0]
    sq = _sq_distances(arr)
    adj = sq <= params.eps * params.eps
    core = adj.sum(axis=1) >= params.min_samples

    uf = _UnionFind(n)
    core_idx = np.flatnonzero(core)
    if core_idx.size:
        sub = adj[np.ix_(core_idx, core_idx)]
        for a, b in zip(*np.nonzero(np.triu(sub, k=1))):
            uf.union(int(core_idx[a]), int(core_idx[b]))

    labels = np.full(n, -1, dtype=np.int64)
    root_to_label: dict[int, int] = {}
    owner = np.full(n, -1, dtype=np.int64)  # owning core per point
    for i in core_idx:
        owner[i] = i
    if core_idx.size:
        border = np.flatnonzero(~core & adj[:, core_idx].any(axis=1))
        for i in border:
            cand = core_idx[adj[i, core_idx]]
            d = sq[i, cand]
            best = cand[d == d.min()].min()  # nearest core, ties to lowest
            owner[i] = best
    # Number clusters by their lowest member index.
    for i in range(n):
        if owner[i] < 0:
            continue
        root = uf.find(int(owner[i]))
        if root not in root_to_label:
            root_to_label[root] = len(root_to_label)
        labels[i] = root_to_label[root]
    return labels


def _group_indices(wafer: WaferDataset, structure: StructureId) -> list[int]:
    return [i for i, rec in enumerate(wafer.capacitance)
            if rec.structure.family == structure.family
            and rec.structure.level == structure.level
            and rec.structure.orientation == structure.orientation]


def clean_capacitance(
    wafer: WaferDataset,
    structure: StructureId,
    params: DbscanParams | None = None,
    scale: tuple[float, float, float] | None = None,
) -> tuple[tuple[CapacitanceRecord, ...], CleanReport]:
    """Flag and replace capacitance outliers for one structure group.

    The group pools every instance sharing the structure's family, level and
    orientation (the instance field of ``structure`` is ignored): those
    records share a designed gap, so their healthy values are comparable and
    a die carries several of them, which is what makes the die-mean
    replacement policy meaningful.

    Features per record are (capacitance, die column, die row), each divided
    by its standard deviation unless ``scale`` pins the divisors explicitly.
    Radius comes from ``knee_eps`` with min_samples=2 unless ``params``
    overrides it.  Outliers are replaced by the die mean of clean points of
    the same group, falling back to the wafer clean mean when a die has no
    clean point; replaced records carry ``flagged_outlier=True``.

    Returns the group's records (wafer order, replacements applied) and a
    report with the originals, the radius, the distance curve and the scale
    divisors, enough to rerun the exact same pass.
    """
    idx = _group_indices(wafer, structure)
    if not idx:
        raise ValueError(
            f"wafer {wafer.wafer_id} has no capacitance records for "
            f"{structure.family.value}{structure.level}-"
            f"{structure.orientation.value}")
    recs = [wafer.capacitance[i] for i in idx]
    feats = np.array([[r.value_ff, float(r.die.col), float(r.die.row)]
                      for r in recs])

    if scale is None:
        scales = feats.std(axis=0)
        for j, name in enumerate(("capacitance", "die column", "die row")):
            if scales[j] == 0.0:
                warnings.warn(f"zero variance in {name}; scaling skipped "
                              f"for that coordinate", stacklevel=2)
                scales[j] = 1.0
    else:
        scales = np.asarray(scale, dtype=float)
        if scales.shape != (3,) or not (scales > 0).all():
            raise ValueError("scale must be three positive divisors")
    z = feats / scales

    if params is not None:
        # Radius pinned by the caller: report the curve, skip the estimate.
        min_samples = params.min_samples
        eps = params.eps
        curve = tuple(np.sort(kth_neighbor_distances(z, min_samples)))
        weak = False
    else:
        min_samples = 2
        knee = knee_eps(z, min_samples)
        eps = max(knee.eps, 1e-12)
        curve = knee.curve
        weak = knee.weak
    labels = dbscan(z, DbscanParams(eps=eps, min_samples=min_samples))

    noise = labels == -1
    if noise.all():
        warnings.warn("every point in the group is low-density; nothing to "
                      "average against, records left unchanged", stacklevel=2)
        return tuple(recs), CleanReport(
            n_outliers=0, replaced=(), eps_used=eps,
            knee_curve=curve, scales=tuple(float(s) for s in scales),
            weak_knee=weak)

    # Replacement values come from clean points that were never themselves
    # replaced: imputed values must not feed further imputation, otherwise a
    # rerun on already-cleaned data drifts by rounding instead of fixing.
    # At ingestion no record is flagged, so this filter is inert on raw data.
    basis = ~noise & ~np.array([r.flagged_outlier for r in recs])
    if not basis.any():
        basis = ~noise
    wafer_mean = float(feats[basis, 0].mean())
    die_means: dict = {}
    for r, in_basis in zip(recs, basis):
        if in_basis:
            die_means.setdefault(r.die, []).append(r.value_ff)

    out = list(recs)
    replaced = []
    for pos in np.flatnonzero(noise):
        rec = recs[pos]
        vals = die_means.get(rec.die)
        if vals:
            new, policy = float(np.mean(vals)), _POLICY_DIE
        else:
            new, policy = wafer_mean, _POLICY_WAFER
        out[pos] = replace(rec, value_ff=new, flagged_outlier=True)
        replaced.append(Replacement(index=idx[pos], old_value=rec.value_ff,
                                    new_value=new, policy=policy))
    report = CleanReport(
        n_outliers=int(noise.sum()), replaced=tuple(replaced), eps_used=eps,
        knee_curve=curve, scales=tuple(float(s) for s in scales),
        weak_knee=weak)
    return tuple(out), report


def clean_dataset(
    wafer: WaferDataset,
    params: DbscanParams | None = None,
) -> tuple[WaferDataset, tuple[CleanReport, ...]]:
    """Run clean_capacitance over every structure group of a wafer.

    Groups are processed in canonical order (family, level, orientation);
    each group is independent, so reports compose into one cleaned dataset.
    """
    groups: list[StructureId] = []
    seen = set()
    for rec in wafer.capacitance:
        key = (rec.structure.family, rec.structure.level,
               rec.structure.orientation)
        if key not in seen:
            seen.add(key)
            groups.append(StructureId(*key))
    groups.sort(key=lambda s: (s.family.value, s.level, s.orientation.value))

    records = list(wafer.capacitance)
    reports = []
    for structure in groups:
        _, report = clean_capacitance(wafer, structure, params=params)
        for rep in report.replaced:
            records[rep.index] = replace(
                records[rep.index], value_ff=rep.new_value,
                flagged_outlier=True)
        reports.append(report)
    return (replace(wafer, capacitance=tuple(records)), tuple(reports))
