"""Euclidean clustering and oriented bounding boxes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cloud import IntensityCloud, SpatialIndex
from .errors import DegenerateClusterError
from .geometry import RigidTransform

DEFAULT_MIN_CLUSTER = 30
COLLINEAR_EPS_REL = 1e-12


@dataclass
class Cluster:
    """Member indices into the clustered cloud, in ascending order."""

    indices: np.ndarray

    def __len__(self) -> int:
        return self.indices.size


@dataclass
class ObbCandidate:
    """Oriented bounding box of a cluster.

    ``pose`` stores the box axes as rotation columns and the box center as
    translation, both in the map frame; ``pose.inverse().apply`` therefore
    moves map points into centered box coordinates.  Extents satisfy
    l >= w >= h and the axes follow the same order.
    """

    pose: RigidTransform
    extents: np.ndarray  # (l, w, h)
    indices: np.ndarray  # members, into the clustered cloud

    @property
    def length(self) -> float:
        return float(self.extents[0])

    @property
    def width(self) -> float:
        return float(self.extents[1])

    @property
    def height(self) -> float:
        return float(self.extents[2])


def default_cluster_tolerance(index: SpatialIndex, factor: float = 2.5,
                              sample: int = 20000) -> float:
    """Linking distance scaled from the cloud's mean nearest-neighbor spacing."""
    return factor * index.mean_nn_spacing(sample=sample)


def euclidean_cluster(cloud: IntensityCloud, tol: float,
                      min_size: int = DEFAULT_MIN_CLUSTER,
                      max_size: int | None = None,
                      index: SpatialIndex | None = None) -> list[Cluster]:
    """Connected components linking points within ``tol`` (inclusive).

    Components outside [min_size, max_size] are dropped.  Results are sorted
    by descending size, ties by the smallest member index, so output order is
    reproducible.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    if len(cloud) == 0:
        return []
    if index is None:
        index = SpatialIndex(cloud)
    labels = _kernels.cluster_labels(index.grid, tol)
    n_labels = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=n_labels)
    first = np.full(n_labels, len(cloud), np.int64)
    # labels are assigned in seed order, so the first occurrence is the min member
    seen_order = np.unique(labels, return_index=True)
    first[seen_order[0]] = seen_order[1]
    keep = sizes >= min_size
    if max_size is not None:
        keep &= sizes <= max_size
    chosen = np.nonzero(keep)[0]
    chosen = chosen[np.lexsort((first[chosen], -sizes[chosen]))]
    clusters = []
    order = np.argsort(labels, kind="stable")
    starts = np.searchsorted(labels[order], np.arange(n_labels))
    ends = np.searchsorted(labels[order], np.arange(n_labels), side="right")
    for lbl in chosen:
        members = np.sort(order[starts[lbl]:ends[lbl]])
        clusters.append(Cluster(indices=members.astype(np.int64)))
    return clusters


# Top-two eigenvalues closer than this ratio mean the in-plane direction
# is statistically meaningless (4-fold symmetric clusters like tag rings).
EIGEN_TIE_RATIO = 0.6


def _hull_2d(pts: np.ndarray) -> np.ndarray:
    """Convex hull (CCW, no repeated endpoint) by monotone chain."""
    idx = np.lexsort((pts[:, 1], pts[:, 0]))
    p = pts[idx]
    keep = np.ones(len(p), dtype=bool)
    keep[1:] = (np.abs(np.diff(p, axis=0)) > 1e-15).any(axis=1)
    p = p[keep]
    if len(p) <= 2:
        return p

    def half(seq):
        out = []
        for q in seq:
            while len(out) >= 2:
                a, b = out[-2], out[-1]
                if (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]) > 0:
                    break
                out.pop()
            out.append(q)
        return out

    lower = half(p)
    upper = half(p[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _tightest_angle(pts2: np.ndarray) -> float:
    """Rotation (radians) whose axis-aligned box over pts2 has least area.

    Rotating calipers over hull edges; ties go to the smallest angle folded
    into [0, pi/2), which keeps the result stable under the 4-fold symmetry
    this is used for.
    """
    hull = _hull_2d(pts2)
    if len(hull) <= 2:
        return 0.0
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2)
    best_angle, best_area = 0.0, np.inf
    for ang in np.unique(angles):
        c, s = np.cos(ang), np.sin(ang)
        rot = hull @ np.array([[c, -s], [s, c]])
        ext = rot.max(axis=0) - rot.min(axis=0)
        area = ext[0] * ext[1]
        if area < best_area * (1.0 - 1e-12):
            best_area, best_angle = area, ang
    return best_angle


def compute_obb(cloud: IntensityCloud, cluster: Cluster) -> ObbCandidate:
    """PCA-based oriented bounding box of a cluster.

    Axes are covariance eigenvectors (descending eigenvalue), relabeled so the
    extents come out l >= w >= h.  Sign convention: the first two axes point
    so their largest-magnitude component is positive; the third is their
    cross product, so the basis is always right-handed.  Raises
    DegenerateClusterError for clusters without 3 non-collinear points.

    When the top two eigenvalues tie, every direction in their eigenplane is
    an eigenvector and the solver's pick is numerical noise; a square ring
    then lands anywhere between 0 and 45 degrees off its true edges, and at
    45 degrees the box inflates by sqrt(2).  The tie is resolved by rotating
    the pair inside the eigenplane to the orientation with the smallest box
    area, which is deterministic and rotation-equivariant.
    """
    pts = cloud.xyz[cluster.indices]
    if pts.shape[0] < 3:
        raise DegenerateClusterError(
            f"cluster has {pts.shape[0]} points; need at least 3")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = evals[::-1]
    axes = evecs[:, ::-1]
    if evals[1] <= COLLINEAR_EPS_REL * max(evals[0], 1e-300):
        raise DegenerateClusterError("cluster points are collinear")
    if evals[1] > EIGEN_TIE_RATIO * evals[0]:
        pts2 = centered @ axes[:, :2]
        ang = _tightest_angle(pts2)
        c, s = np.cos(ang), np.sin(ang)
        e0 = c * axes[:, 0] + s * axes[:, 1]
        e1 = -s * axes[:, 0] + c * axes[:, 1]
        axes[:, 0], axes[:, 1] = e0, e1
    # order axes by extent, not eigenvalue, so l >= w >= h is guaranteed
    proj = centered @ axes
    spread = proj.max(axis=0) - proj.min(axis=0)
    order = np.argsort(-spread, kind="stable")
    axes = axes[:, order]
    for j in range(2):
        col = axes[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            axes[:, j] = -col
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    proj = centered @ axes
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    extents = hi - lo
    center = centroid + axes @ ((lo + hi) / 2.0)
    pose = RigidTransform(axes.copy(), center)
    return ObbCandidate(pose=pose, extents=extents.copy(),
                        indices=cluster.indices.copy())
