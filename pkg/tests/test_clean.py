"""Density cleaning: dbscan vs an independent oracle, knee location, and
the flag-and-replace policy on wafer capacitance."""

import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from waferwise.clean import (
    CleanReport,
    DbscanParams,
    clean_capacitance,
    clean_dataset,
    dbscan,
    knee_eps,
    knee_from_distances,
    kth_neighbor_distances,
)
from waferwise.fabsim import WaferSimConfig, generate_wafer
from waferwise.model import (
    CapacitanceRecord,
    DieIndex,
    Family,
    Orientation,
    Recipe,
    StructureId,
    WaferDataset,
    die_grid,
)


def _oracle_dbscan(points, eps, min_samples):
    """Plain-loop reference: neighborhood graph, BFS over cores, nearest-core
    border assignment, clusters numbered by lowest member index."""
    pts = [np.asarray(p, dtype=float) for p in points]
    n = len(pts)

    def dist(i, j):
        return math.sqrt(float(((pts[i] - pts[j]) ** 2).sum()))

    neigh = [[j for j in range(n) if dist(i, j) <= eps] for i in range(n)]
    core = [len(neigh[i]) >= min_samples for i in range(n)]

    comp = [-1] * n
    n_comps = 0
    for i in range(n):
        if core[i] and comp[i] == -1:
            queue = [i]
            comp[i] = n_comps
            while queue:
                a = queue.pop()
                for b in neigh[a]:
                    if core[b] and comp[b] == -1:
                        comp[b] = n_comps
                        queue.append(b)
            n_comps += 1

    labels = [-1] * n
    for i in range(n):
        if core[i]:
            labels[i] = comp[i]
        else:
            cand = [(dist(i, j), j) for j in neigh[i] if core[j]]
            if cand:
                dmin = min(d for d, _ in cand)
                labels[i] = comp[min(j for d, j in cand if d == dmin)]

    order = {}
    for lab in labels:
        if lab != -1 and lab not in order:
            order[lab] = len(order)
    return [order[lab] if lab != -1 else -1 for lab in labels]


def test_dbscan_matches_bruteforce_oracle():
    rng = np.random.default_rng(42)
    for trial in range(200):
        n = int(rng.integers(1, 120))
        dim = int(rng.integers(1, 4))
        pts = rng.normal(0.0, 1.0, size=(n, dim))
        if n >= 8 and trial % 3 == 0:  # sprinkle far points
            pts[: n // 8] *= 20.0
        flat = pts.reshape(n, -1)
        d = np.sqrt(((flat[:, None] - flat[None, :]) ** 2).sum(-1))
        pos = d[d > 0]
        # quantile can land exactly on a pairwise distance; nudge eps off the
        # data values so <= is unambiguous for either distance formula
        eps = float(np.quantile(pos, rng.uniform(0.1, 0.9))) * 1.0000003 \
            if pos.size else 0.5
        ms = int(rng.integers(2, 5))
        got = dbscan(pts, DbscanParams(eps=eps, min_samples=ms))
        want = _oracle_dbscan(pts, eps, ms)
        assert got.tolist() == want, f"trial {trial} n={n} eps={eps} ms={ms}"


def test_dbscan_two_separated_blobs():
    # chains with unit spacing; eps = 1.5 x spacing bridges within a blob only
    pts = [[float(v)] for v in range(10)] + [[100.0 + v] for v in range(10)]
    labels = dbscan(pts, DbscanParams(eps=1.5))
    assert labels[:10].tolist() == [0] * 10
    assert labels[10:].tolist() == [1] * 10


def test_dbscan_isolated_point_is_noise():
    pts = [[float(v)] for v in range(10)] + [[1000.0]]
    labels = dbscan(pts, DbscanParams(eps=1.5))
    assert labels[-1] == -1
    assert labels[:10].tolist() == [0] * 10


def test_dbscan_identical_points_one_cluster():
    pts = [[3.0, -2.0]] * 7
    labels = dbscan(pts, DbscanParams(eps=0.5))
    assert labels.tolist() == [0] * 7


def test_dbscan_single_point_is_noise():
    assert dbscan([[0.0]], DbscanParams(eps=1.0)).tolist() == [-1]


def test_dbscan_border_tie_goes_to_lowest_core_index():
    # Two vertical 4-stacks; the lone point at (5, 0) reaches exactly one
    # core of each at distance 5.0, so its own neighborhood stays below
    # min_samples=4 (border, not core) and the tie resolves to core index 0.
    pts = [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0],
           [10.0, 0.0], [10.0, 1.0], [10.0, 2.0], [10.0, 3.0],
           [5.0, 0.0]]
    labels = dbscan(pts, DbscanParams(eps=5.0, min_samples=4))
    assert labels.tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 0]


def test_dbscan_permutation_invariance():
    rng = np.random.default_rng(9)
    for trial in range(30):
        n = int(rng.integers(5, 80))
        pts = rng.normal(0.0, 1.0, size=(n, 2))
        pts[: max(1, n // 10)] += 15.0
        eps = 0.8
        base = dbscan(pts, DbscanParams(eps=eps))
        perm = rng.permutation(n)
        permuted = dbscan(pts[perm], DbscanParams(eps=eps))
        # same partition of the original identities
        def parts(labels, ident):
            clusters = {}
            noise = set()
            for lab, who in zip(labels, ident):
                if lab == -1:
                    noise.add(who)
                else:
                    clusters.setdefault(lab, set()).add(who)
            return set(map(frozenset, clusters.values())), noise
        assert parts(base, range(n)) == parts(permuted, perm)


def test_dbscan_rejects_bad_input():
    with pytest.raises(ValueError):
        dbscan([], DbscanParams(eps=1.0))
    with pytest.raises(ValueError):
        dbscan([[0.0], [float("nan")]], DbscanParams(eps=1.0))


def test_params_validation():
    with pytest.raises(ValueError):
        DbscanParams(eps=0.0)
    with pytest.raises(ValueError):
        DbscanParams(eps=-1.0)
    with pytest.raises(ValueError):
        DbscanParams(eps=1.0, min_samples=1)


def test_kth_neighbor_counts_self_as_first():
    # points on a line at 0, 1, 3
    d2 = kth_neighbor_distances([[0.0], [1.0], [3.0]], k=2)
    assert d2.tolist() == [1.0, 1.0, 2.0]
    d3 = kth_neighbor_distances([[0.0], [1.0], [3.0]], k=3)
    assert d3.tolist() == [3.0, 2.0, 3.0]
    with pytest.raises(ValueError):
        kth_neighbor_distances([[0.0], [1.0]], k=3)


def test_knee_two_segment_curve_returns_joint():
    for j in (6, 10, 17, 23):
        i = np.arange(30, dtype=float)
        d = np.where(i <= j, i + 1.0, j + 1.0 + 3.0 * (i - j))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            k = knee_from_distances(d)
        assert k.knee_index == j
        assert k.eps == d[j]


def test_knee_hand_frozen_case():
    # Points 0..9 spaced 1 plus outliers at 30 and 50. Nearest-other
    # distances: ten 1.0s, then 20 (50->30) and 21 (30->9); sorted curve
    # [1]*10 + [20, 21]. Smoothing window 5 leaves positions 2..9; the only
    # positive second difference of the smoothed curve is at index 7
    # (window first touches the 20 at sorted position 10), so the knee is
    # index 7 and eps is the raw curve there: 1.0.
    pts = [[float(v)] for v in range(10)] + [[30.0], [50.0]]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        k = knee_eps(pts, 2)
    assert k.knee_index == 7
    assert k.eps == 1.0
    assert k.curve[:10] == (1.0,) * 10
    labels = dbscan(np.asarray(pts), DbscanParams(eps=k.eps))
    assert labels.tolist() == [0] * 10 + [-1, -1]


def test_knee_strong_for_blob_plus_far_outliers():
    rng = np.random.default_rng(5)
    for trial in range(10):
        blob = rng.normal(0.0, 1.0, size=(200, 2))
        angles = 2.0 * math.pi * (np.arange(10) + rng.uniform(0.1, 0.4)) / 10.0
        ring = 25.0 * np.c_[np.cos(angles), np.sin(angles)]
        pts = np.vstack([ring, blob])
        k = knee_eps(pts, 2)
        assert not k.weak
        # eps below the outlier band: ring points are all farther than eps
        # from anything, so dbscan flags at least 90% of them
        labels = dbscan(pts, DbscanParams(eps=k.eps))
        assert (labels[:10] == -1).mean() >= 0.9


def test_knee_weak_for_uniform_points():
    rng = np.random.default_rng(11)
    for trial in range(10):
        pts = rng.uniform(0.0, 1.0, size=(150, 2))
        with pytest.warns(UserWarning, match="weak knee"):
            k = knee_eps(pts, 2)
        assert k.weak
        assert k.curve[0] <= k.eps <= k.curve[-1]


def test_knee_descends_below_a_spread_outlier_band():
    # bulk at spacing 0.01, band spread 5..40: the largest second difference
    # sits between band points, the transition into the band must win
    rng = np.random.default_rng(3)
    bulk = np.cumsum(np.full(300, 0.01))[:, None]
    band = (100.0 + np.cumsum(rng.uniform(5.0, 40.0, size=12)))[:, None]
    pts = np.vstack([bulk, band])
    k = knee_eps(pts, 2)
    assert k.eps < 5.0
    labels = dbscan(pts, DbscanParams(eps=k.eps))
    assert (labels[300:] == -1).all()


def test_knee_errors():
    with pytest.raises(ValueError):
        knee_from_distances([1.0, 2.0])
    with pytest.raises(ValueError):
        knee_eps([[0.0], [1.0]], 2)


# --- wafer-level cleaning -------------------------------------------------


@pytest.fixture(scope="module")
def programmed_wafer():
    return generate_wafer("D10", Recipe.PROGRAMMED, WaferSimConfig(), seed=77)


def _group_indices(ds, fam, lvl, ori):
    return [i for i, r in enumerate(ds.capacitance)
            if r.structure.family == fam and r.structure.level == lvl
            and r.structure.orientation == ori]


def test_clean_recall_on_injected_ba_failures(programmed_wafer):
    ds = programmed_wafer.dataset
    injected = set(programmed_wafer.injected_failures)
    hit = total = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for lvl in range(1, 7):
            for ori in (Orientation.HORIZONTAL, Orientation.VERTICAL):
                recs, rep = clean_capacitance(
                    ds, StructureId(Family.BA, lvl, ori))
                group_injected = injected & set(
                    _group_indices(ds, Family.BA, lvl, ori))
                flagged = {r.index for r in rep.replaced}
                hit += len(group_injected & flagged)
                total += len(group_injected)
    assert total > 0
    assert hit / total >= 0.9


def _ba_group_with_failures(wafer, minimum=3):
    injected = set(wafer.injected_failures)
    for lvl in range(1, 7):
        for ori in (Orientation.HORIZONTAL, Orientation.VERTICAL):
            idx = _group_indices(wafer.dataset, Family.BA, lvl, ori)
            if len(injected & set(idx)) >= minimum:
                return StructureId(Family.BA, lvl, ori), idx
    pytest.fail("no BA group with enough injected failures at this seed")


def test_clean_variance_drops_and_report_is_consistent(programmed_wafer):
    ds = programmed_wafer.dataset
    target, idx = _ba_group_with_failures(programmed_wafer)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        recs, rep = clean_capacitance(ds, target)
    assert rep.n_outliers == len(rep.replaced) > 0
    raw = np.array([ds.capacitance[i].value_ff for i in idx])
    cleaned = np.array([r.value_ff for r in recs])
    assert cleaned.var() < raw.var()
    flagged_pos = {i for i, r in enumerate(recs) if r.flagged_outlier}
    assert len(flagged_pos) == rep.n_outliers
    for r in rep.replaced:
        assert ds.capacitance[r.index].value_ff == r.old_value
        assert r.policy in ("die-mean", "wafer-mean")
    # untouched records are identical objectswise
    replaced_set = {r.index for r in rep.replaced}
    for pos, i in enumerate(idx):
        if i not in replaced_set:
            assert recs[pos] == ds.capacitance[i]


def test_clean_die_mean_replacement_value(programmed_wafer):
    ds = programmed_wafer.dataset
    target, idx = _ba_group_with_failures(programmed_wafer)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        recs, rep = clean_capacitance(ds, target)
    pos_of = {i: p for p, i in enumerate(idx)}
    flagged = {r.index for r in rep.replaced}
    checked = 0
    for r in rep.replaced:
        if r.policy != "die-mean":
            continue
        die = ds.capacitance[r.index].die
        mates = [recs[pos_of[i]].value_ff for i in idx
                 if ds.capacitance[i].die == die and i not in flagged]
        assert r.new_value == pytest.approx(np.mean(mates), rel=1e-12)
        checked += 1
    assert checked > 0


def _toy_wafer(values_by_die, level=4):
    """One BA group, 5 instances per die, explicit per-die base values."""
    grid = die_grid(len(values_by_die), 5, 5)
    records = []
    for die, base in zip(grid, values_by_die):
        for inst in range(5):
            records.append(CapacitanceRecord(
                die=die,
                structure=StructureId(Family.BA, level, Orientation.HORIZONTAL, inst),
                value_ff=base + 0.003 * inst))
    return WaferDataset(wafer_id="T01", recipe=Recipe.NON_PROGRAMMED,
                        grid=tuple(grid), overlay=(), cdsem=(),
                        capacitance=tuple(records), seed=0)


def test_clean_whole_die_failure_uses_wafer_mean():
    bases = [2.0 + 0.01 * k for k in range(20)] + [60.0]
    ds = _toy_wafer(bases)
    # spread the bad die's instances so they do not bond into a cluster
    bad = [r for r in ds.capacitance if r.value_ff > 50.0]
    records = list(ds.capacitance)
    for j, rec in enumerate(bad):
        records[records.index(rec)] = replace(rec, value_ff=60.0 + 7.0 * j)
    ds = replace(ds, capacitance=tuple(records))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        recs, rep = clean_capacitance(ds, StructureId(Family.BA, 4, Orientation.HORIZONTAL))
    bad_die = bad[0].die
    hit = [r for r in rep.replaced if ds.capacitance[r.index].die == bad_die]
    assert len(hit) == 5
    clean_vals = [r.value_ff for r in ds.capacitance if r.die != bad_die]
    for r in hit:
        assert r.policy == "wafer-mean"
        assert r.new_value == pytest.approx(np.mean(clean_vals), rel=1e-12)


def test_clean_no_failures_generous_eps_is_identity():
    ds = _toy_wafer([2.0 + 0.01 * k for k in range(20)])
    recs, rep = clean_capacitance(
        ds, StructureId(Family.BA, 4, Orientation.HORIZONTAL),
        params=DbscanParams(eps=1e6))
    assert rep.n_outliers == 0
    assert rep.replaced == ()
    assert recs == ds.capacitance


def test_clean_second_pass_with_frozen_radius_changes_nothing(programmed_wafer):
    # Idempotence is about the data: rerunning with the first pass's radius
    # and feature scales must reproduce every record bit for bit. A rerun may
    # still rank an already-replaced point as low-density, but its
    # replacement value is the same die mean, so nothing moves.
    ds = programmed_wafer.dataset
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cleaned, reports = clean_dataset(ds)
        for structure, rep in zip(
                [StructureId(fam, lvl, ori)
                 for fam in (Family.AB, Family.BA)
                 for lvl in range(1, 7)
                 for ori in (Orientation.HORIZONTAL, Orientation.VERTICAL)],
                reports):
            again, rep2 = clean_capacitance(
                cleaned, structure,
                params=DbscanParams(eps=rep.eps_used), scale=rep.scales)
            group = [r for r in cleaned.capacitance
                     if r.structure.family == structure.family
                     and r.structure.level == structure.level
                     and r.structure.orientation == structure.orientation]
            assert list(again) == group, structure
            for r2 in rep2.replaced:
                assert r2.new_value == r2.old_value


def test_clean_zero_variance_warns():
    ds = _toy_wafer([2.0] * 12)
    records = tuple(replace(r, value_ff=2.0) for r in ds.capacitance)
    ds = replace(ds, capacitance=records)
    with pytest.warns(UserWarning, match="zero variance in capacitance"):
        recs, rep = clean_capacitance(
            ds, StructureId(Family.BA, 4, Orientation.HORIZONTAL))
    assert rep.n_outliers == 0


def test_clean_missing_group_raises(programmed_wafer):
    ds = replace(programmed_wafer.dataset, capacitance=())
    with pytest.raises(ValueError, match="no capacitance records"):
        clean_capacitance(ds, StructureId(Family.BA, 1, Orientation.VERTICAL))


def test_clean_dataset_composes_group_reports(programmed_wafer):
    ds = programmed_wafer.dataset
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cleaned, reports = clean_dataset(ds)
    assert len(reports) == 24  # 2 families x 6 levels x 2 orientations
    total = sum(rep.n_outliers for rep in reports)
    flagged = sum(1 for r in cleaned.capacitance if r.flagged_outlier)
    assert flagged == total > 0
    replaced_idx = {r.index for rep in reports for r in rep.replaced}
    for i, (old, new) in enumerate(zip(ds.capacitance, cleaned.capacitance)):
        if i in replaced_idx:
            assert new.flagged_outlier and new.value_ff != old.value_ff
        else:
            assert new == old
