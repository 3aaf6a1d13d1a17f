"""Reseat candidate patches on a close-range virtual plane and image them.

Each buffered candidate is moved into its box frame, rotated so the thin
axis (the surface normal) points along +X, pushed out to the plane x = 1 m,
and rendered into a spherical-projection intensity image as seen from the
origin.  Sub-pixel image coordinates invert through the exact same chain
back to map coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateImageError
from .filtering import BufferedCandidate
from .geometry import RigidTransform

PLANE_OFFSET = np.array([1.0, 0.0, 0.0])  # virtual plane sits at x = 1 m

# cyclic permutations sending axis i to slot 0; all have determinant +1
_CYCLE = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def to_obb_frame(points: np.ndarray, pose: RigidTransform) -> np.ndarray:
    """Express map-frame points in the candidate's box frame."""
    return pose.inverse().apply(points)


def align_normal_to_view(points: np.ndarray):
    """Rotate box-frame points so the thinnest direction lies along +X.

    The thin direction is measured from the data (smallest coordinate
    spread), so the function also behaves sensibly on inputs that did not
    come from an extent-sorted box.  Returns (points, permutation): the
    permutation p reorders columns as out[:, j] = in[:, p[j]] and is always
    cyclic, hence a proper rotation.
    """
    pts = np.asarray(points, dtype=np.float64)
    spread = pts.max(axis=0) - pts.min(axis=0)
    perm = _CYCLE[int(np.argmin(spread))]
    return pts[:, perm], perm


def invert_permutation(perm) -> tuple:
    inv = [0, 0, 0]
    for j, p in enumerate(perm):
        inv[p] = j
    return tuple(inv)


def to_intermediate_plane(points: np.ndarray) -> np.ndarray:
    """Shift origin-centered points out to the viewing plane at x = 1 m."""
    return np.asarray(points, dtype=np.float64) + PLANE_OFFSET


# 180 degree turn about the in-plane z axis: reverses the viewing side
_FLIP = np.array([-1.0, -1.0, 1.0])


@dataclass
class PlaneFrameCandidate:
    """A candidate patch re-seated on the x = 1 m plane, origin viewpoint.

    ``points`` are plane-frame coordinates; ``source_indices`` trace each
    point to the raw map cloud; ``pose`` and ``perm`` record the exact chain
    used to get here so it can be inverted.
    """

    points: np.ndarray
    intensity: np.ndarray
    source_indices: np.ndarray
    pose: RigidTransform
    perm: tuple
    flipped: bool = False

    def to_map_frame(self, plane_points: np.ndarray) -> np.ndarray:
        """Invert the full reseating chain for arbitrary plane-frame points."""
        p = np.atleast_2d(np.asarray(plane_points, dtype=np.float64))
        box = p - PLANE_OFFSET
        if self.flipped:
            box = box * _FLIP
        box = box[:, invert_permutation(self.perm)]
        out = self.pose.apply(box)
        return out[0] if np.ndim(plane_points) == 1 else out


def reproject_candidate(cand: BufferedCandidate) -> PlaneFrameCandidate:
    """Run the full reseating chain on a buffered candidate.

    The viewing side is chosen so the virtual sensor sits on the same side
    of the patch as the map origin.  Surfaces are scanned from where the
    sensor actually was, and maps are built around the trajectory, so the
    origin side is the printed side for any reasonable map.  Without this
    the box normal's sign, which carries no physical meaning, would decide
    the side and tags would randomly decode as their mirror image.
    """
    box = to_obb_frame(cand.cloud.xyz, cand.pose)
    aligned, perm = align_normal_to_view(box)
    view_dir = cand.pose.rotation[:, perm[0]]
    flipped = bool(view_dir @ cand.pose.translation < 0.0)
    if flipped:
        aligned = aligned * _FLIP
    return PlaneFrameCandidate(
        points=to_intermediate_plane(aligned),
        intensity=cand.cloud.intensity.copy(),
        source_indices=cand.source_indices.copy(),
        pose=cand.pose,
        perm=perm,
        flipped=flipped,
    )


@dataclass(frozen=True)
class ImageGeometry:
    """Spherical-projection raster geometry.

    A point with azimuth t (atan2(y, x)) and inclination p (atan2(z, hypot))
    lands on column u = round(t / theta_az) + u_offset and row
    v = round(p / theta_incl) + v_offset, rounding half away from zero.
    """

    theta_az: float
    theta_incl: float
    u_offset: int
    v_offset: int
    width: int
    height: int

    def __post_init__(self):
        if self.theta_az <= 0 or self.theta_incl <= 0:
            raise ValueError("angular resolutions must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8 pixels")


@dataclass
class IntensityImage:
    """Rendered raster: values (NaN where empty), per-pixel range and the
    index of the contributing point (-1 where empty)."""

    values: np.ndarray
    ranges: np.ndarray
    source: np.ndarray
    geom: ImageGeometry

    @property
    def empty_mask(self) -> np.ndarray:
        return np.isnan(self.values)


def spherical_angles(points: np.ndarray):
    """(azimuth, inclination, range) of points as seen from the origin."""
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    az = np.arctan2(y, x)
    horiz = np.hypot(x, y)
    incl = np.arctan2(z, horiz)
    rng = np.sqrt(x * x + y * y + z * z)
    return az, incl, rng


def project_pixels(points: np.ndarray, geom: ImageGeometry):
    """Integer pixel (u=column, v=row) per point plus range."""
    az, incl, rng = spherical_angles(points)
    u = _kernels.round_half_away(az / geom.theta_az) + geom.u_offset
    v = _kernels.round_half_away(incl / geom.theta_incl) + geom.v_offset
    return u, v, rng


def auto_geometry(points: np.ndarray, side: float,
                  target_px: int = 256, px_bounds=(64, 1024),
                  coverage: float = 2.0) -> ImageGeometry:
    """Pick a raster geometry for a candidate patch around a tag of known side.

    Resolution aims at ``target_px`` pixels across twice the tag side (the
    buffered patch width), coarsened so the expected number of points per
    pixel stays at least ``coverage`` (leaves the fill step only thin holes
    to close, even for unstructured scans), and kept within ``px_bounds``
    pixels per 2*side.  Offsets translate the patch's angular bounding box
    to start at pixel 0.
    """
    if side <= 0:
        raise ValueError("tag side must be positive")
    pts = np.asarray(points, dtype=np.float64)
    span = 2.0 * side  # patch angular width at unit range, small-angle
    theta = span / target_px
    if pts.shape[0] >= 2:
        widths = pts.max(axis=0) - pts.min(axis=0)
        area = widths[1] * widths[2]  # in-plane footprint, x is the normal
        if area > 0.0:
            density = pts.shape[0] / area
            theta = max(theta, float(np.sqrt(coverage / density)))
    theta = min(max(theta, span / px_bounds[1]), span / px_bounds[0])

    az, incl, _ = spherical_angles(points)
    u_raw = _kernels.round_half_away(az / theta)
    v_raw = _kernels.round_half_away(incl / theta)
    width = int(u_raw.max() - u_raw.min()) + 1
    height = int(v_raw.max() - v_raw.min()) + 1
    if width < 8 or height < 8:
        raise DegenerateImageError(
            f"candidate footprint only {width}x{height} pixels")
    return ImageGeometry(
        theta_az=theta, theta_incl=theta,
        u_offset=int(-u_raw.min()), v_offset=int(-v_raw.min()),
        width=width, height=height,
    )


def render_intensity_image(cand: PlaneFrameCandidate,
                           side: float | None = None,
                           geom: ImageGeometry | None = None,
                           fill_passes: int = 2,
                           fill_min_neighbors: int = 5) -> IntensityImage:
    """Rasterize a plane-frame candidate into an intensity image.

    Nearest range wins per pixel; holes with enough non-empty neighbors are
    closed with their median afterward.  Geometry is derived from the data
    unless ``geom`` is supplied.
    """
    if cand.points.shape[0] == 0:
        raise DegenerateImageError("no points to render")
    if geom is None:
        if side is None:
            raise ValueError("either a geometry or the tag side is required")
        geom = auto_geometry(cand.points, side)
    u, v, rng = project_pixels(cand.points, geom)
    if (u.min() < 0 or v.min() < 0 or u.max() >= geom.width
            or v.max() >= geom.height):
        raise ValueError("image geometry does not cover the projected points")
    occ_u = u.max() - u.min() + 1
    occ_v = v.max() - v.min() + 1
    if occ_u < 8 or occ_v < 8:
        raise DegenerateImageError(
            f"candidate footprint only {occ_u}x{occ_v} pixels")
    values, ranges, source = _kernels.rasterize(
        u, v, rng, cand.intensity, geom.width, geom.height)
    values, ranges, source = _kernels.hole_fill(
        values, ranges, source,
        passes=fill_passes, min_neighbors=fill_min_neighbors)
    return IntensityImage(values=values, ranges=ranges, source=source,
                          geom=geom)


def unproject_pixel(pixel, geom: ImageGeometry,
                    cand: PlaneFrameCandidate) -> np.ndarray:
    """Map a sub-pixel image coordinate (u, v) back to a 3D map point.

    The pixel defines a ray from the origin; its intersection with the
    x = 1 m plane runs backward through the recorded reseating chain.
    """
    u, v = float(pixel[0]), float(pixel[1])
    az = (u - geom.u_offset) * geom.theta_az
    incl = (v - geom.v_offset) * geom.theta_incl
    # in-image rays always point into the +x half-space
    assert abs(az) < np.pi / 2 and abs(incl) < np.pi / 2
    plane_pt = np.array([1.0, np.tan(az), np.tan(incl) / np.cos(az)])
    return cand.to_map_frame(plane_pt)


def write_pgm(image: IntensityImage, path: str) -> None:
    """8-bit binary PGM dump; empty pixels become 0, data maps to 1..255."""
    vals = image.values
    mask = ~np.isnan(vals)
    out = np.zeros(vals.shape, dtype=np.uint8)
    if mask.any():
        lo = float(vals[mask].min())
        hi = float(vals[mask].max())
        if hi > lo:
            scaled = 1.0 + 254.0 * (vals[mask] - lo) / (hi - lo)
        else:
            scaled = np.full(mask.sum(), 255.0)
        out[mask] = np.round(scaled).astype(np.uint8)
    h, w = out.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(out.tobytes())
