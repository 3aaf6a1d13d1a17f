"""Synthetic intensity-cloud scenes with exact tag ground truth.

Scenes are planar walls sampled at a chosen density from one or more
viewpoints.  Each viewpoint keeps only the points it could physically see
(z-buffer over fine angular bins, surfaces never occlude themselves), so a
stitched multi-viewpoint map reproduces the failure mode where a single
global spherical projection overlays surfaces that were never mutually
visible.  Tags are painted into wall intensities module by module, and the
generator emits the exact vertex positions and poses it used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cloud import IntensityCloud
from .decoder import TagDictionary
from .errors import InvalidSpecError
from .geometry import RigidTransform
from .pose import canonical_corners
from .reproject import ImageGeometry, IntensityImage, project_pixels

ZBUFFER_BIN_RAD = np.radians(0.05)
DEFAULT_WALL_INTENSITY = 120.0
DEFAULT_WHITE = 220.0
DEFAULT_BLACK = 30.0
DEFAULT_INTENSITY_SIGMA = 5.0


def _wall_frame(center, normal, up=None) -> RigidTransform:
    """Right-handed wall frame: Z = normal, Y = in-plane up, X = Y x Z."""
    z = np.asarray(normal, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz == 0:
        raise InvalidSpecError("wall normal must be nonzero")
    z = z / nz
    if up is None:
        up = np.array([0.0, 0.0, 1.0])
        if abs(z @ up) > 0.9:
            up = np.array([0.0, 1.0, 0.0])
    y = np.asarray(up, dtype=np.float64)
    y = y - (y @ z) * z
    ny = np.linalg.norm(y)
    if ny < 1e-12:
        raise InvalidSpecError("wall up vector is parallel to the normal")
    y = y / ny
    x = np.cross(y, z)
    rot = np.column_stack([x, y, z])
    return RigidTransform(rotation=rot,
                          translation=np.asarray(center, dtype=np.float64))


@dataclass
class WallSpec:
    center: np.ndarray
    normal: np.ndarray
    size: tuple          # (width along X, height along Y), meters
    intensity: float = DEFAULT_WALL_INTENSITY
    density: float | None = None   # points per square meter, None = scene default
    up: np.ndarray | None = None

    def frame(self) -> RigidTransform:
        return _wall_frame(self.center, self.normal, self.up)


@dataclass
class TagSpec:
    tag_id: int
    wall: int
    side: float                      # full sheet side, margin ring included
    offset: tuple = (0.0, 0.0)       # in-wall position of the tag center
    yaw_deg: float = 0.0             # in-plane rotation about the wall normal
    white: float = DEFAULT_WHITE
    black: float = DEFAULT_BLACK


@dataclass
class ViewpointSpec:
    origin: np.ndarray
    direction: np.ndarray | None = None   # optional viewing cone axis
    fov_deg: float | None = None          # full cone aperture


@dataclass
class SceneSpec:
    walls: list
    tags: list
    viewpoints: list
    density: float = 1e5
    range_sigma: float = 0.0
    intensity_sigma: float = 0.0

    def validate(self, dictionary: TagDictionary | None = None) -> None:
        if not self.walls:
            raise InvalidSpecError("scene needs at least one wall")
        if not self.viewpoints:
            raise InvalidSpecError("scene needs at least one viewpoint")
        if self.density <= 0:
            raise InvalidSpecError("density must be positive")
        for w in self.walls:
            if w.density is not None and w.density <= 0:
                raise InvalidSpecError("wall density must be positive")
            if w.size[0] <= 0 or w.size[1] <= 0:
                raise InvalidSpecError("wall size must be positive")
        for t in self.tags:
            if not (0 <= t.wall < len(self.walls)):
                raise InvalidSpecError(f"tag references wall {t.wall}")
            if t.side <= 0:
                raise InvalidSpecError("tag side must be positive")
            if dictionary is not None and not (
                    0 <= t.tag_id < len(dictionary)):
                raise InvalidSpecError(f"tag id {t.tag_id} not in dictionary")
            # the whole sheet must stay on its wall, any yaw
            wall = self.walls[t.wall]
            half = t.side / np.sqrt(2.0)
            if (abs(t.offset[0]) + half > wall.size[0] / 2
                    or abs(t.offset[1]) + half > wall.size[1] / 2):
                raise InvalidSpecError(
                    f"tag id {t.tag_id} does not fit on wall {t.wall}")


def tag_pose_on_wall(spec: SceneSpec, tag: TagSpec) -> RigidTransform:
    """Tag frame -> map: X,Y in the wall plane, Z along the wall normal."""
    wall = spec.walls[tag.wall].frame()
    yaw = np.radians(tag.yaw_deg)
    c, s = np.cos(yaw), np.sin(yaw)
    rot_in_wall = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(
        rotation=wall.rotation @ rot_in_wall,
        translation=wall.apply([tag.offset[0], tag.offset[1], 0.0]),
    )


@dataclass
class TagTruth:
    tag_id: int
    vertices: np.ndarray          # (4,3) map frame, canonical index order
    tag_to_map: RigidTransform
    side: float


@dataclass
class SceneTruth:
    tags: list

    def by_id(self) -> dict:
        out: dict = {}
        for t in self.tags:
            out.setdefault(t.tag_id, []).append(t)
        return out


def _module_intensity(local_xy: np.ndarray, tag: TagSpec,
                      code: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Paint tag modules onto intensities for points in tag-local coords."""
    n = code.shape[0]
    m = n + 4
    a = tag.side
    x, y = local_xy[:, 0], local_xy[:, 1]
    inside = (np.abs(x) <= a / 2) & (np.abs(y) <= a / 2)
    out = base.copy()
    if not inside.any():
        return out
    col = np.clip(((x[inside] + a / 2) * m / a).astype(np.int64), 0, m - 1)
    row = np.clip(((a / 2 - y[inside]) * m / a).astype(np.int64), 0, m - 1)
    ring = np.minimum(np.minimum(row, col), np.minimum(m - 1 - row, m - 1 - col))
    val = np.where(ring == 0, tag.white, tag.black)
    pay = ring >= 2
    if pay.any():
        bit = code[row[pay] - 2, col[pay] - 2]
        val[pay] = np.where(bit, tag.white, tag.black)
    out[inside] = val
    return out


def _sample_wall(spec: SceneSpec, widx: int, rng,
                 dictionary: TagDictionary):
    """Uniform surface samples on one wall with painted intensities."""
    wall = spec.walls[widx]
    density = wall.density if wall.density is not None else spec.density
    area = wall.size[0] * wall.size[1]
    count = int(round(density * area))
    uv = rng.random((count, 2))
    uv[:, 0] = (uv[:, 0] - 0.5) * wall.size[0]
    uv[:, 1] = (uv[:, 1] - 0.5) * wall.size[1]
    intensity = np.full(count, float(wall.intensity))
    for tag in spec.tags:
        if tag.wall != widx:
            continue
        yaw = np.radians(tag.yaw_deg)
        c, s = np.cos(yaw), np.sin(yaw)
        du = uv[:, 0] - tag.offset[0]
        dv = uv[:, 1] - tag.offset[1]
        local = np.column_stack([c * du + s * dv, -s * du + c * dv])
        intensity = _module_intensity(
            local, tag, dictionary.codes[tag.tag_id], intensity)
    frame = wall.frame()
    pts = frame.apply(np.column_stack([uv, np.zeros(count)]))
    return pts, intensity


def _angular_bins(vecs: np.ndarray) -> np.ndarray:
    az = np.arctan2(vecs[:, 1], vecs[:, 0])
    incl = np.arctan2(vecs[:, 2], np.hypot(vecs[:, 0], vecs[:, 1]))
    ub = _kernels.round_half_away(az / ZBUFFER_BIN_RAD)
    vb = _kernels.round_half_away(incl / ZBUFFER_BIN_RAD)
    return (ub + 4000) * 8001 + (vb + 4000)


def synth_scene(spec: SceneSpec, seed: int,
                dictionary: TagDictionary | None = None):
    """Sample, z-buffer and stitch a scene; returns (cloud, truth).

    Every (viewpoint, wall) pair draws from its own seed stream, so the
    result is bit-identical for a given (spec, seed) regardless of how the
    loops are scheduled.
    """
    from .decoder import builtin_dictionary
    if dictionary is None:
        dictionary = builtin_dictionary()
    spec.validate(dictionary)

    all_pts = []
    all_int = []
    for vidx, vp in enumerate(spec.viewpoints):
        origin = np.asarray(vp.origin, dtype=np.float64)
        pts_v = []
        int_v = []
        surf_v = []
        for widx in range(len(spec.walls)):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, vidx, widx]))
            pts, inten = _sample_wall(spec, widx, rng, dictionary)
            rel = pts - origin
            keepable = np.linalg.norm(rel, axis=1) > 1e-9
            if vp.direction is not None and vp.fov_deg is not None:
                axis = np.asarray(vp.direction, dtype=np.float64)
                axis = axis / np.linalg.norm(axis)
                cosang = (rel @ axis) / np.maximum(
                    np.linalg.norm(rel, axis=1), 1e-12)
                keepable &= cosang >= np.cos(np.radians(vp.fov_deg) / 2.0)
            pts_v.append(pts[keepable])
            int_v.append(inten[keepable])
            surf_v.append(np.full(int(keepable.sum()), widx, dtype=np.int64))
        pts_v = np.concatenate(pts_v)
        int_v = np.concatenate(int_v)
        surf_v = np.concatenate(surf_v)
        if pts_v.shape[0] == 0:
            continue
        rel = pts_v - origin
        rng_v = np.linalg.norm(rel, axis=1)
        keep = _kernels.zbuffer_keep(_angular_bins(rel), rng_v, surf_v)
        pts_v = pts_v[keep]
        int_v = int_v[keep]
        rel = rel[keep]
        rng_v = rng_v[keep]
        noise_rng = np.random.default_rng(
            np.random.SeedSequence([seed, vidx, len(spec.walls)]))
        if spec.range_sigma > 0 and pts_v.shape[0] > 0:
            eps = noise_rng.normal(0.0, spec.range_sigma, pts_v.shape[0])
            pts_v = pts_v + rel / rng_v[:, None] * eps[:, None]
        if spec.intensity_sigma > 0 and pts_v.shape[0] > 0:
            int_v = np.maximum(
                int_v + noise_rng.normal(0.0, spec.intensity_sigma,
                                         pts_v.shape[0]), 0.0)
        all_pts.append(pts_v)
        all_int.append(int_v)

    if not all_pts:
        raise InvalidSpecError("scene produced no visible points")
    cloud = IntensityCloud(np.concatenate(all_pts), np.concatenate(all_int))

    truth_tags = []
    for tag in spec.tags:
        pose = tag_pose_on_wall(spec, tag)
        truth_tags.append(TagTruth(
            tag_id=tag.tag_id,
            vertices=pose.apply(canonical_corners(tag.side)),
            tag_to_map=pose,
            side=tag.side,
        ))
    return cloud, SceneTruth(tags=truth_tags)


def spherical_project_baseline(cloud: IntensityCloud,
                               geom: ImageGeometry,
                               fill_passes: int = 2) -> IntensityImage:
    """Single global projection of the whole map from the origin.

    The comparison mode: every point is projected regardless of where it was
    scanned from, so mutually invisible surfaces overwrite each other.
    Points outside the raster are dropped (a global panorama is pointless
    when only the tag's window matters).
    """
    u, v, rng = project_pixels(cloud.xyz, geom)
    ok = (u >= 0) & (u < geom.width) & (v >= 0) & (v < geom.height)
    values, ranges, source = _kernels.rasterize(
        u[ok], v[ok], rng[ok], cloud.intensity[ok], geom.width, geom.height)
    # remap source indices to the full cloud
    idx = np.nonzero(ok)[0]
    remap = source >= 0
    source[remap] = idx[source[remap]]
    if fill_passes > 0:
        values, ranges, source = _kernels.hole_fill(values, ranges, source,
                                                    passes=fill_passes)
    return IntensityImage(values=values, ranges=ranges, source=source,
                          geom=geom)


def window_geometry(center: np.ndarray, side: float, margin: float = 1.5,
                    theta: float = ZBUFFER_BIN_RAD) -> ImageGeometry:
    """Raster geometry for a window around a map point, seen from the origin.

    The resolution defaults to the sensor-like angular bin: the comparison
    projection must image at scan resolution, where points from mutually
    invisible surfaces really do land on the same pixels.
    """
    c = np.asarray(center, dtype=np.float64)
    r = float(np.linalg.norm(c))
    if r < 1e-9:
        raise InvalidSpecError("window center sits at the origin")
    half_px = max(8, int(np.ceil(margin * side / r / theta)))
    az = float(np.arctan2(c[1], c[0]))
    incl = float(np.arctan2(c[2], np.hypot(c[0], c[1])))
    u_c = int(_kernels.round_half_away(np.array([az / theta]))[0])
    v_c = int(_kernels.round_half_away(np.array([incl / theta]))[0])
    return ImageGeometry(
        theta_az=theta, theta_incl=theta,
        u_offset=half_px - u_c, v_offset=half_px - v_c,
        width=2 * half_px, height=2 * half_px,
    )


# scoring


@dataclass
class TagScore:
    tag_id: int
    detected: bool
    translation_error: np.ndarray | None = None   # per map axis, meters
    rotation_error_deg: np.ndarray | None = None  # yaw, pitch, roll (Z-Y-X)
    vertex_rms: float | None = None
    mirrored: bool | None = None


@dataclass
class EvalReport:
    scores: list
    detected: int
    expected: int
    duplicates: list = field(default_factory=list)
    spurious: list = field(default_factory=list)

    def counts(self) -> str:
        return f"{self.detected} / {self.expected}"


def evaluate(detections, truth: SceneTruth) -> EvalReport:
    """Score detections against generator truth, matched by tag id.

    Translation errors are per map axis; rotation errors split the relative
    rotation into yaw-pitch-roll (Z-Y-X) magnitudes in degrees.  Duplicate
    ids are all scored and flagged.
    """
    from .geometry import matrix_to_euler_zyx
    truth_by_id = truth.by_id()
    seen: dict = {}
    for det in detections:
        seen.setdefault(det.tag_id, []).append(det)
    scores = []
    detected_count = 0
    duplicates = [tid for tid, ds in seen.items() if len(ds) > 1]
    spurious = [tid for tid in seen if tid not in truth_by_id]
    for tid, truths in truth_by_id.items():
        t = truths[0]
        dets = seen.get(tid, [])
        if not dets:
            scores.append(TagScore(tag_id=tid, detected=False))
            continue
        detected_count += 1
        for det in dets:
            dpose = det.tag_to_map()
            dr = dpose.rotation @ t.tag_to_map.rotation.T
            ypr = np.degrees(np.abs(matrix_to_euler_zyx(dr)))
            scores.append(TagScore(
                tag_id=tid,
                detected=True,
                translation_error=dpose.translation - t.tag_to_map.translation,
                rotation_error_deg=ypr,
                vertex_rms=float(np.sqrt(
                    ((det.vertices - t.vertices) ** 2).sum(axis=1).mean())),
                mirrored=det.mirrored,
            ))
    return EvalReport(scores=scores, detected=detected_count,
                      expected=len(truth_by_id), duplicates=duplicates,
                      spurious=spurious)


# config and truth files


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "density": spec.density,
        "range_sigma": spec.range_sigma,
        "intensity_sigma": spec.intensity_sigma,
        "walls": [{
            "center": list(map(float, w.center)),
            "normal": list(map(float, w.normal)),
            "size": list(map(float, w.size)),
            "intensity": float(w.intensity),
            **({"density": float(w.density)} if w.density is not None else {}),
            **({"up": list(map(float, w.up))} if w.up is not None else {}),
        } for w in spec.walls],
        "tags": [{
            "id": int(t.tag_id),
            "wall": int(t.wall),
            "side": float(t.side),
            "offset": list(map(float, t.offset)),
            "yaw_deg": float(t.yaw_deg),
            "white": float(t.white),
            "black": float(t.black),
        } for t in spec.tags],
        "viewpoints": [{
            "origin": list(map(float, v.origin)),
            **({"direction": list(map(float, v.direction)),
                "fov_deg": float(v.fov_deg)}
               if v.direction is not None and v.fov_deg is not None else {}),
        } for v in spec.viewpoints],
    }


def scene_spec_from_dict(d: dict) -> SceneSpec:
    try:
        walls = [WallSpec(
            center=np.asarray(w["center"], dtype=np.float64),
            normal=np.asarray(w["normal"], dtype=np.float64),
            size=tuple(w["size"]),
            intensity=float(w.get("intensity", DEFAULT_WALL_INTENSITY)),
            density=float(w["density"]) if "density" in w else None,
            up=np.asarray(w["up"], dtype=np.float64) if "up" in w else None,
        ) for w in d["walls"]]
        tags = [TagSpec(
            tag_id=int(t["id"]),
            wall=int(t["wall"]),
            side=float(t["side"]),
            offset=tuple(t.get("offset", (0.0, 0.0))),
            yaw_deg=float(t.get("yaw_deg", 0.0)),
            white=float(t.get("white", DEFAULT_WHITE)),
            black=float(t.get("black", DEFAULT_BLACK)),
        ) for t in d.get("tags", [])]
        views = [ViewpointSpec(
            origin=np.asarray(v["origin"], dtype=np.float64),
            direction=(np.asarray(v["direction"], dtype=np.float64)
                       if "direction" in v else None),
            fov_deg=float(v["fov_deg"]) if "fov_deg" in v else None,
        ) for v in d["viewpoints"]]
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidSpecError(f"malformed scene config: {e}") from e
    return SceneSpec(
        walls=walls, tags=tags, viewpoints=views,
        density=float(d.get("density", 1e5)),
        range_sigma=float(d.get("range_sigma", 0.0)),
        intensity_sigma=float(d.get("intensity_sigma", 0.0)),
    )


def load_scene_spec(path: str) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as f:
        return scene_spec_from_dict(json.load(f))


def save_scene_spec(spec: SceneSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_spec_to_dict(spec), f, indent=2)
        f.write("\n")


def save_truth(truth: SceneTruth, path: str) -> None:
    data = {"tags": [{
        "id": int(t.tag_id),
        "side": float(t.side),
        "vertices": [[float(x) for x in v] for v in t.vertices],
        "rotation": [[float(x) for x in row] for row in t.tag_to_map.rotation],
        "translation": [float(x) for x in t.tag_to_map.translation],
    } for t in truth.tags]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def load_truth(path: str) -> SceneTruth:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    tags = [TagTruth(
        tag_id=int(t["id"]),
        side=float(t["side"]),
        vertices=np.asarray(t["vertices"], dtype=np.float64),
        tag_to_map=RigidTransform(
            rotation=np.asarray(t["rotation"], dtype=np.float64),
            translation=np.asarray(t["translation"], dtype=np.float64)),
    ) for t in data["tags"]]
    return SceneTruth(tags=tags)
