"""Intensity-gradient estimation and gradient-based map downsampling.

Each point gets a local linear intensity model fitted by least squares over
its n-nearest neighborhood (the point itself included); points whose gradient
magnitude clears a threshold survive.  Pattern boundaries on tag surfaces
produce large gradients, so the surviving set concentrates on marker edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cloud import IntensityCloud, SpatialIndex
from .errors import DegenerateNeighborhoodError

RANK_EPS_REL = 1e-8


@dataclass(frozen=True)
class GradientModel:
    """Local linear intensity model I(p) ~= gradient . (p - centroid) + offset.

    ``offset`` is exactly the mean intensity of the fitted neighborhood.
    """

    gradient: np.ndarray
    offset: float

    def norm(self) -> float:
        return float(np.linalg.norm(self.gradient))


@dataclass(frozen=True)
class DownsampleParams:
    """Gradient-downsampling knobs.

    relative_mode picks the threshold as a quantile of all gradient norms;
    otherwise ``tau`` is the absolute cutoff.  Points with norm strictly
    greater than the effective threshold are kept.
    """

    n_neighbors: int = 20
    tau: float | None = None
    quantile: float = 0.9
    relative_mode: bool = True

    def __post_init__(self):
        if self.n_neighbors < 4:
            raise ValueError("neighborhood needs at least 4 points")
        if self.relative_mode:
            if not (0.0 < self.quantile < 1.0):
                raise ValueError("quantile must lie in (0, 1)")
        else:
            if self.tau is None or self.tau <= 0:
                raise ValueError("absolute mode needs tau > 0")


@dataclass
class DownsampleDiagnostics:
    points_total: int = 0
    points_kept: int = 0
    degenerate_skips: int = 0
    effective_tau: float = 0.0


def fit_local_model(cloud: IntensityCloud, index: SpatialIndex, i: int,
                    n: int = 20) -> GradientModel:
    """Fit the local linear intensity model at point ``i``.

    The neighborhood is the n nearest points including point i itself.
    Rank-deficient directions (e.g. the normal of a planar patch) contribute
    zero gradient.  Raises DegenerateNeighborhoodError when every neighbor
    coincides with the point.
    """
    n = min(n, len(cloud))
    idx, _, found = index.knn_batch(cloud.xyz[i:i + 1], n)
    nbr = idx[0, :int(found[0])]
    A, b, degen = _kernels.fit_gradients(cloud.xyz, cloud.intensity,
                                         nbr.reshape(1, -1), RANK_EPS_REL)
    if degen[0]:
        raise DegenerateNeighborhoodError(
            f"all {n} neighborhood points of point {i} coincide")
    return GradientModel(A[0].copy(), float(b[0]))


def gradient_norms(cloud: IntensityCloud, index: SpatialIndex,
                   n: int = 20):
    """Gradient magnitude for every point plus degeneracy flags."""
    n = min(n, len(cloud))
    nbr, _, found = index.knn_batch(cloud.xyz, n)
    A, b, degen = _kernels.fit_gradients(cloud.xyz, cloud.intensity, nbr,
                                         RANK_EPS_REL)
    norms = np.sqrt((A * A).sum(axis=1))
    return norms, degen


def downsample_by_gradient(cloud: IntensityCloud, params: DownsampleParams,
                           index: SpatialIndex | None = None):
    """Keep points whose gradient magnitude exceeds the effective threshold.

    Returns (subset cloud, kept-index map into the input, diagnostics).
    Point order is preserved; degenerate neighborhoods are skipped and
    counted, never fatal.
    """
    diag = DownsampleDiagnostics(points_total=len(cloud))
    if len(cloud) == 0:
        return cloud.subset(np.empty(0, np.int64)), np.empty(0, np.int64), diag
    if index is None:
        index = SpatialIndex(cloud)
    norms, degen = gradient_norms(cloud, index, params.n_neighbors)
    diag.degenerate_skips = int(degen.sum())
    valid = ~degen
    if params.relative_mode:
        vals = norms[valid]
        tau = float(np.quantile(vals, params.quantile)) if vals.size else 0.0
    else:
        tau = float(params.tau)
    diag.effective_tau = tau
    kept = np.nonzero(valid & (norms > tau))[0].astype(np.int64)
    diag.points_kept = int(kept.size)
    return cloud.subset(kept), kept, diag
