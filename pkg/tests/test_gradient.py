import numpy as np
import pytest

from maptag.cloud import IntensityCloud, SpatialIndex
from maptag.gradient import (DownsampleParams, downsample_by_gradient,
                             fit_local_model, gradient_norms)


def planar_cloud(rng, n=400, span=1.0):
    xy = (rng.random((n, 2)) - 0.5) * span
    return np.column_stack([xy, np.zeros(n)])


def test_linear_field_planar_patch():
    rng = np.random.default_rng(0)
    xyz = planar_cloud(rng)
    inten = 2.0 * xyz[:, 0] + 3.0 * xyz[:, 1] + 10.0  # offset stays positive
    c = IntensityCloud(xyz, inten)
    index = SpatialIndex(c)
    m = fit_local_model(c, index, 5, n=10)
    assert abs(m.gradient[0] - 2.0) < 1e-9 * 3.0
    assert abs(m.gradient[1] - 3.0) < 1e-9 * 3.0
    # the out-of-plane direction is rank deficient: gradient forced to 0
    assert m.gradient[2] == 0.0


def test_constant_intensity():
    rng = np.random.default_rng(1)
    xyz = rng.random((200, 3))
    c = IntensityCloud(xyz, np.full(200, 42.0))
    index = SpatialIndex(c)
    m = fit_local_model(c, index, 0, n=12)
    assert np.allclose(m.gradient, 0.0, atol=1e-9)
    assert abs(m.offset - 42.0) < 1e-9
    down, kept, diag = downsample_by_gradient(
        c, DownsampleParams(n_neighbors=12, tau=0.5, relative_mode=False))
    assert len(down) == 0
    assert kept.size == 0


def test_full_rank_linear_field_matches_dense_solve():
    rng = np.random.default_rng(2)
    xyz = rng.normal(0, 1, (500, 3))
    coef = np.array([1.5, -2.0, 0.7])
    inten = xyz @ coef + 100.0  # offset keeps intensities nonnegative
    c = IntensityCloud(xyz, inten)
    index = SpatialIndex(c)
    for i in (0, 100, 499):
        m = fit_local_model(c, index, i, n=20)
        assert np.allclose(m.gradient, coef, rtol=1e-9, atol=1e-9)
        # independent dense solve over the same neighborhood
        nbr = index.knn(xyz[i], 20).indices
        design = np.column_stack([xyz[nbr], np.ones(len(nbr))])
        sol, *_ = np.linalg.lstsq(design, inten[nbr], rcond=None)
        assert np.allclose(m.gradient, sol[:3], rtol=1e-8, atol=1e-8)


def test_b_is_neighborhood_mean():
    rng = np.random.default_rng(3)
    xyz = rng.normal(0, 1, (100, 3))
    inten = rng.random(100) * 200
    c = IntensityCloud(xyz, inten)
    index = SpatialIndex(c)
    m = fit_local_model(c, index, 7, n=15)
    nbr = index.knn(xyz[7], 15).indices
    assert m.offset == pytest.approx(inten[nbr].mean(), abs=1e-12)


def test_gradient_norm_values():
    rng = np.random.default_rng(4)
    xyz = planar_cloud(rng)
    for coef, expect in [((0.0, 0.0), 0.0), ((3.0, 4.0), 5.0),
                         ((2.0, 3.0), np.sqrt(13.0))]:
        inten = coef[0] * xyz[:, 0] + coef[1] * xyz[:, 1] + 10.0
        c = IntensityCloud(xyz, inten)
        norms, degen = gradient_norms(c, SpatialIndex(c), n=10)
        assert not degen.any()
        assert np.allclose(norms, expect, rtol=1e-9, atol=1e-9)


def test_step_edge_keeps_only_edge_points():
    rng = np.random.default_rng(5)
    n = 4000
    xy = (rng.random((n, 2)) - 0.5)  # 1 m^2 patch, spacing ~ 1/sqrt(n)
    xyz = np.column_stack([xy, np.zeros(n)])
    inten = np.where(xy[:, 0] > 0, 200.0, 20.0)
    c = IntensityCloud(xyz, inten)
    spacing = 1.0 / np.sqrt(n)
    # a quantile that bites: most of the patch is flat, so low quantiles
    # degenerate to tau = 0 and keep the whole neighborhood-radius band
    down, kept, diag = downsample_by_gradient(
        c, DownsampleParams(n_neighbors=20, quantile=0.98))
    assert diag.effective_tau > 0
    assert len(down) > 0
    # kept points hug the edge line x = 0
    assert np.abs(down.xyz[:, 0]).max() <= 2.0 * spacing


def test_monotone_in_tau():
    rng = np.random.default_rng(6)
    xyz = planar_cloud(rng, n=900)
    inten = np.where(xyz[:, 0] > 0, 150.0, 50.0)
    c = IntensityCloud(xyz, inten)
    index = SpatialIndex(c)
    prev = None
    for tau in (1.0, 10.0, 100.0, 1000.0):
        _, kept, _ = downsample_by_gradient(
            c, DownsampleParams(n_neighbors=15, tau=tau, relative_mode=False),
            index)
        if prev is not None:
            assert set(kept).issubset(prev)
        prev = set(kept)


def test_output_subset_no_duplicates():
    rng = np.random.default_rng(7)
    xyz = planar_cloud(rng, n=500)
    inten = np.hypot(xyz[:, 0], xyz[:, 1]) * 100
    c = IntensityCloud(xyz, inten)
    down, kept, _ = downsample_by_gradient(
        c, DownsampleParams(n_neighbors=10, quantile=0.5))
    assert len(set(kept)) == len(kept)
    assert np.array_equal(down.xyz, c.xyz[kept])
    assert np.array_equal(down.intensity, c.intensity[kept])
    # kept-index map is sorted: point order preserved
    assert np.array_equal(kept, np.sort(kept))


def test_params_validation():
    with pytest.raises(ValueError):
        DownsampleParams(n_neighbors=3)
    with pytest.raises(ValueError):
        DownsampleParams(quantile=1.0)
    with pytest.raises(ValueError):
        DownsampleParams(relative_mode=False, tau=None)
    with pytest.raises(ValueError):
        DownsampleParams(relative_mode=False, tau=-1.0)


def test_determinism():
    rng = np.random.default_rng(8)
    xyz = planar_cloud(rng, n=800)
    inten = np.where(np.abs(xyz[:, 1]) < 0.1, 180.0, 60.0)
    c = IntensityCloud(xyz, inten)
    p = DownsampleParams(n_neighbors=20, quantile=0.8)
    _, k1, d1 = downsample_by_gradient(c, p)
    _, k2, d2 = downsample_by_gradient(c, p)
    assert np.array_equal(k1, k2)
    assert d1.effective_tau == d2.effective_tau
