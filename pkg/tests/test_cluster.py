"""Clustering and oriented-box fitting."""

import numpy as np
import pytest

from maptag.cloud import IntensityCloud, SpatialIndex
from maptag.cluster import (
    Cluster,
    compute_obb,
    default_cluster_tolerance,
    euclidean_cluster,
)
from maptag.errors import DegenerateClusterError
from maptag.geometry import RigidTransform, random_rotation

from helpers import union_find_clusters


def _cloud(xyz, inten=None):
    xyz = np.asarray(xyz, dtype=np.float64)
    if inten is None:
        inten = np.full(len(xyz), 100.0)
    return IntensityCloud(xyz, np.asarray(inten, dtype=np.float64))


# ---------------------------------------------------------------- clustering


def test_two_strips_split():
    # two parallel strips of 5 points, 1 apart inside, 2 apart between
    xs = np.arange(5, dtype=np.float64)
    a = np.c_[xs, np.zeros(5), np.zeros(5)]
    b = np.c_[xs, np.full(5, 2.0), np.zeros(5)]
    c = _cloud(np.vstack([a, b]))
    got = euclidean_cluster(c, tol=1.5, min_size=1)
    assert len(got) == 2
    assert sorted(len(g.indices) for g in got) == [5, 5]
    # tol above the gap merges them
    merged = euclidean_cluster(c, tol=2.5, min_size=1)
    assert len(merged) == 1 and len(merged[0].indices) == 10


def test_min_size_filter():
    big = np.random.default_rng(0).uniform(0, 0.1, size=(40, 3))
    lone = np.array([[5.0, 5.0, 5.0], [5.0, 5.05, 5.0]])
    c = _cloud(np.vstack([big, lone]))
    got = euclidean_cluster(c, tol=0.2, min_size=3)
    assert len(got) == 1
    assert len(got[0].indices) == 40


def test_max_size_filter():
    xyz = np.random.default_rng(3).uniform(0, 0.1, size=(50, 3))
    c = _cloud(xyz)
    assert euclidean_cluster(c, tol=0.5, min_size=1, max_size=49) == []
    kept = euclidean_cluster(c, tol=0.5, min_size=1, max_size=50)
    assert len(kept) == 1


def test_matches_union_find_oracle():
    rng = np.random.default_rng(7)
    for trial in range(6):
        n = int(rng.integers(40, 300))
        xyz = rng.uniform(0, 1, size=(n, 3))
        tol = float(rng.uniform(0.05, 0.25))
        c = _cloud(xyz)
        got = euclidean_cluster(c, tol=tol, min_size=1)
        want = union_find_clusters(xyz, tol)
        have = {frozenset(g.indices.tolist()) for g in got}
        assert have == want, f"trial {trial}"


def test_cluster_ordering_and_partition():
    rng = np.random.default_rng(11)
    centers = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [3, 3, 0]], dtype=float)
    sizes = [50, 50, 80, 20]
    parts = [
        c + rng.uniform(-0.05, 0.05, size=(s, 3)) for c, s in zip(centers, sizes)
    ]
    xyz = np.vstack(parts)
    order = rng.permutation(len(xyz))
    c = _cloud(xyz[order])
    got = euclidean_cluster(c, tol=0.3, min_size=1)
    ns = [len(g.indices) for g in got]
    # descending size, ties broken by smallest member index
    assert ns == sorted(ns, reverse=True)
    firsts = [int(g.indices.min()) for g in got]
    for a, b in zip(got, got[1:]):
        if len(a.indices) == len(b.indices):
            assert int(a.indices.min()) < int(b.indices.min())
    assert len(set(firsts)) == len(firsts)
    # a partition: indices sorted within cluster, disjoint union covers all
    seen = np.concatenate([g.indices for g in got])
    assert len(seen) == len(xyz) and len(np.unique(seen)) == len(xyz)
    for g in got:
        assert np.all(np.diff(g.indices) > 0)


def test_default_tolerance_tracks_spacing():
    step = 0.01
    g = np.mgrid[0:40, 0:40].reshape(2, -1).T * step
    xyz = np.c_[g, np.zeros(len(g))]
    idx = SpatialIndex(_cloud(xyz))
    tol = default_cluster_tolerance(idx)
    # 2.5x the mean nearest-neighbor spacing on a square grid
    assert tol == pytest.approx(2.5 * step, rel=0.05)
    assert default_cluster_tolerance(idx, factor=4.0) == pytest.approx(
        4.0 * step, rel=0.05
    )


# ----------------------------------------------------------------------- obb


def _box_from(c, idxs=None):
    cl = Cluster(np.arange(c.xyz.shape[0]) if idxs is None else np.asarray(idxs))
    return compute_obb(c, cl)


def test_obb_unit_square():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, size=(400, 2))
    # pin the hull so extents are exactly 1 x 1
    pts[:4] = [[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]]
    c = _cloud(np.c_[pts, np.zeros(len(pts))])
    box = _box_from(c)
    assert box.length == pytest.approx(1.0, abs=1e-9)
    assert box.width == pytest.approx(1.0, abs=1e-9)
    assert box.height == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(box.pose.translation[:2], 0.0, atol=1e-9)


def test_obb_rotated_rectangle_extents():
    # symmetric grid: sample covariance is exactly axis-aligned, so the
    # principal axes recover the rectangle frame to machine precision
    gx, gy = np.meshgrid(np.linspace(-0.5, 0.5, 41), np.linspace(-0.3, 0.3, 25))
    uv = np.c_[gx.ravel(), gy.ravel()]
    flat = np.c_[uv, np.zeros(len(uv))]
    R = random_rotation(np.random.default_rng(1))
    t = np.array([2.0, -1.0, 0.5])
    c = _cloud(flat @ R.T + t)
    box = _box_from(c)
    assert box.length == pytest.approx(1.0, abs=1e-6)
    assert box.width == pytest.approx(0.6, abs=1e-6)
    assert box.height == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(box.pose.translation, t, atol=1e-6)


def test_obb_extent_order_and_rotation_validity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        xyz = rng.normal(size=(60, 3)) * [3.0, 1.0, 0.2]
        box = _box_from(_cloud(xyz))
        l, w, h = box.extents
        assert l >= w >= h >= 0
        R = box.pose.rotation
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_obb_contains_points_tightly():
    rng = np.random.default_rng(5)
    for _ in range(10):
        xyz = rng.normal(size=(200, 3)) * rng.uniform(0.2, 3.0, size=3)
        xyz = xyz @ random_rotation(rng).T + rng.normal(size=3)
        box = _box_from(_cloud(xyz))
        local = box.pose.inverse().apply(xyz)
        half = box.extents / 2.0
        assert np.all(np.abs(local) <= half + 1e-9)
        # tight: some point touches every face pair
        for ax in range(3):
            assert np.max(np.abs(local[:, ax])) >= half[ax] - 1e-9


def test_obb_rotation_equivariant_extents():
    rng = np.random.default_rng(9)
    xyz = rng.normal(size=(150, 3)) * [2.0, 0.9, 0.1]
    e0 = _box_from(_cloud(xyz)).extents
    for _ in range(5):
        R = random_rotation(rng)
        e1 = _box_from(_cloud(xyz @ R.T)).extents
        assert np.allclose(e0, e1, atol=1e-6)


def test_obb_degenerate_inputs():
    line = np.c_[np.linspace(0, 1, 30), np.zeros(30), np.zeros(30)]
    with pytest.raises(DegenerateClusterError):
        _box_from(_cloud(line))
    two = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    with pytest.raises(DegenerateClusterError):
        _box_from(_cloud(two))


def test_obb_square_ring_no_diagonal_inflation():
    # hollow square outline: eigenvalues tie, but the fitted box must hug
    # the sides, not the diagonal, at any attitude
    s = 0.2
    t = np.linspace(-0.5, 0.5, 60, endpoint=False)
    e = np.full_like(t, 0.5)
    ring = np.vstack(
        [np.c_[t, -e], np.c_[e, t], np.c_[-t, e], np.c_[-e, -t]]
    ) * s
    flat = np.c_[ring, np.zeros(len(ring))]
    rng = np.random.default_rng(13)
    for _ in range(10):
        R = random_rotation(rng)
        box = _box_from(_cloud(flat @ R.T))
        assert box.length == pytest.approx(s, abs=1e-6)
        assert box.width == pytest.approx(s, abs=1e-6)
    # deterministic across repeat calls
    c = _cloud(flat @ R.T)
    b1, b2 = _box_from(c), _box_from(c)
    assert np.array_equal(b1.pose.rotation, b2.pose.rotation)
    assert np.array_equal(b1.extents, b2.extents)
