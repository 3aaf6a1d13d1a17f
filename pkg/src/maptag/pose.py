"""6-DOF tag pose from four decoded 3D vertices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVerticesError, PlanarityViolationError
from .geometry import RigidTransform

COLLINEAR_EPS_REL = 1e-9


def canonical_corners(side: float) -> np.ndarray:
    """Tag-frame corner positions matching the decoder's index convention.

    Index 0 is (-a/2, +a/2, 0) and the order runs counter-clockwise as seen
    looking against the tag normal (+Z toward the viewer).
    """
    if side <= 0:
        raise ValueError("side must be positive")
    h = side / 2.0
    return np.array([
        [-h, +h, 0.0],
        [-h, -h, 0.0],
        [+h, -h, 0.0],
        [+h, +h, 0.0],
    ])


def solve_pose_svd(canonical: np.ndarray, detected: np.ndarray):
    """Least-squares rigid alignment canonical -> detected.

    Returns (transform, rms residual).  The rotation is forced to be proper
    (determinant +1): a mirrored vertex set raises the residual instead of
    flipping handedness.
    """
    a = np.asarray(canonical, dtype=np.float64)
    b = np.asarray(detected, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError("need matching (N,3) point sets")
    if not np.isfinite(b).all():
        raise DegenerateVerticesError("non-finite vertex coordinates")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    qa = a - ca
    qb = b - cb
    sv = np.linalg.svd(qb, compute_uv=False)
    if sv[1] <= COLLINEAR_EPS_REL * max(sv[0], 1e-300):
        raise DegenerateVerticesError("detected vertices are collinear")
    h = qa.T @ qb
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    corr = np.diag([1.0, 1.0, d])
    rot = vt.T @ corr @ u.T
    t = cb - rot @ ca
    pose = RigidTransform(rotation=rot, translation=t)
    resid = pose.apply(a) - b
    rms = float(np.sqrt((resid ** 2).sum(axis=1).mean()))
    return pose, rms


def plane_deviation(points: np.ndarray) -> float:
    """Largest distance from the points' least-squares plane."""
    q = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(q)
    return float(np.abs(q @ vt[-1]).max())


@dataclass
class TagDetection:
    """One localized tag.

    ``vertices`` are map-frame corners in canonical index order (index 0 =
    tag's top-left).  ``pose`` carries map coordinates into the tag frame;
    ``pose.inverse()`` places the tag in the map (its translation is the tag
    center, its columns the tag axes).
    """

    tag_id: int
    mirrored: bool
    vertices: np.ndarray
    pose: RigidTransform
    rms_residual: float

    def tag_to_map(self) -> RigidTransform:
        return self.pose.inverse()

    def center(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


def assemble_detection(tag_id: int, mirrored: bool, vertices: np.ndarray,
                       side: float, thickness: float) -> TagDetection:
    """Build a validated TagDetection from decoder output.

    A mirrored decode delivers vertices with indices 1 and 3 exchanged (the
    image showed the tag back-to-front); they are swapped back before the
    pose is solved.  Vertices must be coplanar within twice the thickness
    allowance.
    """
    verts = np.asarray(vertices, dtype=np.float64).reshape(4, 3).copy()
    if mirrored:
        verts[[1, 3]] = verts[[3, 1]]
    dev = plane_deviation(verts)
    if dev > 2.0 * thickness:
        raise PlanarityViolationError(
            f"vertices deviate {dev:.4f} m from a plane "
            f"(allowed {2.0 * thickness:.4f})")
    tag2map, rms = solve_pose_svd(canonical_corners(side), verts)
    return TagDetection(
        tag_id=int(tag_id),
        mirrored=bool(mirrored),
        vertices=verts,
        pose=tag2map.inverse(),
        rms_residual=rms,
    )
