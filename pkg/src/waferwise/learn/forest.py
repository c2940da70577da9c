"""Regression tree ensembles: bagged best-split trees and the
random-threshold variant.

Both kinds grow 60 CART regression trees to purity (a node stops only when
it is too small to split, its targets are constant, or no feature varies
inside it) and average the trees' outputs. They differ exactly where the
published description puts the difference:

- RandomForest: each tree sees a bootstrap resample; each node evaluates a
  random subset of max_features features and scans every midpoint between
  consecutive sorted values for the split minimizing the summed child
  squared error.
- ExtraTrees: no resampling; each node draws one uniform threshold inside
  each candidate feature's node range and keeps the best of those.

Candidate features are taken from a fresh random permutation per node,
skipping features that are constant within the node, so a splittable node
always splits. Score ties break toward the lowest feature index, then the
lowest threshold. Every random draw comes from a per-tree generator seeded
by (seed, tree index), which makes fits reproducible and independent of how
tree fitting is scheduled across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .base import (
    FittedModel,
    ForestSpec,
    ModelKind,
    ModelSpec,
    ScalerState,
    _as_target,
    apply_scaler,
    as_matrix,
)

__all__ = ["ForestParams", "Tree", "fit_forest"]


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat node arrays; feature -1 marks a leaf, value is the node mean."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, z: np.ndarray) -> np.ndarray:
        nid = np.zeros(z.shape[0], dtype=np.int64)
        rows = np.flatnonzero(self.feature[nid] >= 0)
        while rows.size:
            cur = nid[rows]
            go_left = z[rows, self.feature[cur]] <= self.threshold[cur]
            nid[rows] = np.where(go_left, self.left[cur], self.right[cur])
            rows = rows[self.feature[nid[rows]] >= 0]
        return self.value[nid]


@dataclass(frozen=True, eq=False)
class ForestParams:
    trees: tuple[Tree, ...]

    def tree_predictions(self, z: np.ndarray) -> np.ndarray:
        return np.array([t.predict(z) for t in self.trees])

    def predict(self, z: np.ndarray) -> np.ndarray:
        return self.tree_predictions(z).mean(axis=0)


def _best_midpoint(v, ys):
    """Best sorted-midpoint split of one feature: (sse, threshold)."""
    order = np.argsort(v, kind="stable")
    vs, yo = v[order], ys[order]
    csum = np.cumsum(yo)
    csq = np.cumsum(yo * yo)
    total, total_sq, m = csum[-1], csq[-1], len(yo)
    cut = np.flatnonzero(vs[:-1] < vs[1:])  # left block = 0..k
    nl = cut + 1.0
    nr = m - nl
    sse = (csq[cut] - csum[cut] ** 2 / nl
           + (total_sq - csq[cut]) - (total - csum[cut]) ** 2 / nr)
    k = cut[int(np.argmin(sse))]
    thr = 0.5 * (vs[k] + vs[k + 1])
    if thr >= vs[k + 1]:             # midpoint rounded up to the right value
        thr = vs[k]
    return float(sse.min()), float(thr)


def _grow_tree(z, yv, seed_pair, max_features, min_split, bootstrap,
               random_threshold):
    rng = np.random.default_rng(np.random.SeedSequence(seed_pair))
    n = z.shape[0]
    idx0 = rng.integers(0, n, size=n) if bootstrap else np.arange(n)

    feature, threshold = [], []
    left, right, value = [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    stack = [(new_node(), idx0)]
    while stack:
        nid, idx = stack.pop()
        if idx.size == 1:                # pure by construction
            value[nid] = float(yv[idx[0]])
            continue
        ys = yv[idx]
        value[nid] = float(np.add.reduce(ys)) / idx.size
        if idx.size < min_split or np.minimum.reduce(ys) == np.maximum.reduce(ys):
            continue
        sub = z[idx]
        mins = np.minimum.reduce(sub, axis=0)
        maxs = np.maximum.reduce(sub, axis=0)
        perm = rng.permutation(z.shape[1])
        cands = perm[mins[perm] < maxs[perm]][:max_features]
        if cands.size == 0:
            continue                     # every feature constant in the node
        if random_threshold:
            lo, hi = mins[cands], maxs[cands]
            thr = rng.uniform(lo, hi)    # one draw per varying candidate
            hit = thr >= hi              # uniform() may round up to hi
            if hit.any():
                thr[hit] = np.nextafter(hi[hit], lo[hit])
            went_left = (sub[:, cands] <= thr).astype(np.float64)
            nl = np.add.reduce(went_left, axis=0)
            y2 = ys * ys
            sl = ys @ went_left
            s2l = y2 @ went_left
            sse = (s2l - sl ** 2 / nl
                   + (np.add.reduce(y2) - s2l)
                   - (np.add.reduce(ys) - sl) ** 2 / (idx.size - nl))
            pick = int(np.lexsort((thr, cands, sse))[0])
            f, cut = int(cands[pick]), float(thr[pick])
        else:
            best = None                  # (sse, feature, threshold)
            for f in cands:
                sse_f, thr_f = _best_midpoint(sub[:, f], ys)
                if (best is None or sse_f < best[0]
                        or (sse_f == best[0] and (int(f), thr_f) < best[1:])):
                    best = (sse_f, int(f), thr_f)
            _, f, cut = best
        mask = sub[:, f] <= cut
        feature[nid] = f
        threshold[nid] = cut
        lid, rid = new_node(), new_node()
        left[nid], right[nid] = lid, rid
        stack.append((rid, idx[~mask]))
        stack.append((lid, idx[mask]))

    return Tree(feature=np.asarray(feature, dtype=np.int64),
                threshold=np.asarray(threshold),
                left=np.asarray(left, dtype=np.int64),
                right=np.asarray(right, dtype=np.int64),
                value=np.asarray(value))


def fit_forest(X, y, spec: ModelSpec, *, scaler: ScalerState | None = None,
               jobs: int = 1) -> FittedModel:
    """Fit a RandomForest or ExtraTrees regressor per the module rules."""
    if spec.kind not in (ModelKind.RANDOM_FOREST, ModelKind.EXTRA_TREES):
        raise ValueError(f"fit_forest got spec kind {spec.kind.value}")
    arr, names = as_matrix(X)
    yv = _as_target(y, arr.shape[0])
    n, d = arr.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    z = apply_scaler(scaler, arr) if scaler is not None else arr

    hp: ForestSpec = spec.forest
    random_threshold = spec.kind is ModelKind.EXTRA_TREES
    notes = []
    max_features = hp.max_features
    if max_features is None:
        max_features = d if random_threshold else max(1, d // 3)
        notes.append(f"max_features={max_features} (convention; source "
                     f"settings leave it open)")
    max_features = min(max_features, d)
    bootstrap = hp.bootstrap
    if bootstrap is None:
        bootstrap = not random_threshold
        notes.append(f"bootstrap={bootstrap} (convention per kind)")

    def build(t: int) -> Tree:
        return _grow_tree(z, yv, [spec.seed, t], max_features,
                          hp.min_samples_split, bootstrap, random_threshold)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(build, range(hp.n_trees)))
    else:
        trees = [build(t) for t in range(hp.n_trees)]

    return FittedModel(kind=spec.kind, spec=spec, scaler=scaler, n_train=n,
                       d=d, col_names=names, params=ForestParams(tuple(trees)),
                       notes=tuple(notes))
