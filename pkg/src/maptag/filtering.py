"""Geometric filters that pick tag-like boxes out of cluster candidates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import IntensityCloud
from .cluster import ObbCandidate
from .errors import EmptySelectionError
from .geometry import RigidTransform

DIAGONAL_MARGIN = 0.02  # multiplicative slack on both diagonal bounds
ASPECT_LIMIT = 1.5


@dataclass(frozen=True)
class TagGeometry:
    """Physical tag parameters: side length and expected cluster thickness.

    ``thickness`` absorbs ranging noise and the downsampled ring's spread
    along the tag normal; it must stay below the side length.
    """

    side: float
    thickness: float = 0.03

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("tag side must be positive")
        if not (0 < self.thickness < self.side):
            raise ValueError("thickness must lie in (0, side)")

    def diagonal_bounds(self) -> tuple[float, float]:
        a2 = self.side * self.side
        d2 = self.thickness * self.thickness
        return float(np.sqrt(2 * a2 + d2)), float(np.sqrt(4 * a2 + d2))


@dataclass
class CandidateDiagnostics:
    l_obb: float = 0.0
    aspect: float = 0.0
    pass_diagonal: bool = False
    pass_aspect: bool = False
    zero_width: bool = False


def criterion_diagonal(obb: ObbCandidate, geom: TagGeometry,
                       margin: float = DIAGONAL_MARGIN) -> bool:
    """Diagonal test: thin box whose space diagonal fits a rotated tag.

    The box must be no thicker than the expected thickness, and its space
    diagonal must land between the flat-square diagonal and the 45-degree
    bounding-square diagonal.  Both diagonal bounds are relaxed by the
    multiplicative ``margin`` because a noiseless axis-aligned tag sits
    marginally below the exact lower bound (its edge ring erodes nothing).
    """
    l, w, h = (float(v) for v in obb.extents)
    if h > geom.thickness:
        return False
    lo, hi = geom.diagonal_bounds()
    l_obb = float(np.sqrt(l * l + w * w + h * h))
    return (1.0 - margin) * lo <= l_obb <= (1.0 + margin) * hi


def criterion_aspect(obb: ObbCandidate,
                     limit: float = ASPECT_LIMIT) -> bool:
    """Face aspect test: length / width no more than ``limit`` (inclusive).

    Zero-width boxes fail (ratio undefined); callers can inspect diagnostics
    for the zero-width flag.
    """
    l, w = float(obb.extents[0]), float(obb.extents[1])
    if w <= 0.0:
        return False
    ratio = l / w
    return (1.0 / limit) <= ratio <= limit


def filter_candidates(obbs: list[ObbCandidate], geom: TagGeometry,
                      margin: float = DIAGONAL_MARGIN):
    """Apply both criteria, preserving order.

    Returns (survivors, per-candidate diagnostics for every input).
    """
    kept = []
    diags = []
    for obb in obbs:
        l, w, h = (float(v) for v in obb.extents)
        d = CandidateDiagnostics()
        d.l_obb = float(np.sqrt(l * l + w * w + h * h))
        d.zero_width = w <= 0.0
        d.aspect = l / w if w > 0.0 else float("inf")
        d.pass_diagonal = criterion_diagonal(obb, geom, margin)
        d.pass_aspect = criterion_aspect(obb)
        diags.append(d)
        if d.pass_diagonal and d.pass_aspect:
            kept.append(obb)
    return kept, diags


@dataclass
class BufferedCandidate:
    """A tag candidate cut from the raw map around a filtered box.

    ``source_indices`` point into the raw cloud; ``pose`` is bit-identical to
    the input box pose.
    """

    cloud: IntensityCloud
    source_indices: np.ndarray
    pose: RigidTransform
    extents: np.ndarray          # original box extents (l, w, h)
    selection_extents: np.ndarray = field(default=None)  # enlarged box


def buffered_extents(obb: ObbCandidate, geom: TagGeometry,
                     mode: str = "floor", scale: float = 2.0) -> np.ndarray:
    """Enlarged selection box.

    "floor" guarantees the full tag plus margin fits even when the
    downsampled ring under-spans it: faces grow to at least twice the tag
    side, thickness to the expected thickness plus one more layer.  "scale"
    multiplies all extents by ``scale`` (the recommended factor is twice the
    tag side for unit-side tags; kept for compatibility experiments).
    """
    l, w, h = (float(v) for v in obb.extents)
    a, d = geom.side, geom.thickness
    if mode == "floor":
        return np.array([max(l, 2 * a), max(w, 2 * a), max(h, d) + d])
    if mode == "scale":
        return np.array([l * scale, w * scale, h * scale])
    raise ValueError(f"unknown buffer mode {mode!r}")


def extract_buffered(raw: IntensityCloud, obb: ObbCandidate, geom: TagGeometry,
                     mode: str = "floor", scale: float = 2.0) -> BufferedCandidate:
    """Select raw-map points inside the enlarged box around a candidate.

    The enlargement re-captures low-gradient points (module interiors, the
    wall annulus around the tag) that downsampling removed.  Raises
    EmptySelectionError when nothing falls inside.
    """
    sel = buffered_extents(obb, geom, mode, scale)
    half = sel / 2.0
    # cheap axis-aligned prefilter in map frame, then the exact box test
    aabb_half = np.abs(obb.pose.rotation) @ half
    near = np.nonzero(
        (np.abs(raw.xyz - obb.pose.translation) <= aabb_half).all(axis=1)
    )[0]
    inv = obb.pose.inverse()
    box_pts = inv.apply(raw.xyz[near])
    mask = (np.abs(box_pts) <= half).all(axis=1)
    picked = near[mask].astype(np.int64)
    if picked.size == 0:
        raise EmptySelectionError("no raw points inside the buffered box")
    return BufferedCandidate(
        cloud=raw.subset(picked),
        source_indices=picked,
        pose=obb.pose,
        extents=obb.extents.copy(),
        selection_extents=sel,
    )
