"""End-to-end tag localization: map in, detection report out.

Stages run in a fixed order (load, gradient downsample, cluster, box fit,
criteria filter, buffered extraction, reprojection, render, decode, pose).
Per-candidate failures downgrade to diagnostics; only I/O and configuration
problems abort a run.  Reports are written with a fixed float format so
identical inputs produce byte-identical files at any thread count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cloud import IntensityCloud, SpatialIndex, load_pcd, save_pcd
from .cluster import (DEFAULT_MIN_CLUSTER, compute_obb,
                      default_cluster_tolerance, euclidean_cluster)
from .decoder import TagDictionary, builtin_dictionary, decode_image
from .errors import (DegenerateClusterError, DegenerateImageError,
                     EmptySelectionError, MapTagError)
from .filtering import (DIAGONAL_MARGIN, TagGeometry, extract_buffered,
                        filter_candidates)
from .gradient import DownsampleParams, downsample_by_gradient
from .geometry import RigidTransform
from .pose import TagDetection, assemble_detection
from .reproject import (ImageGeometry, render_intensity_image,
                        reproject_candidate, unproject_pixel, write_pgm)
from .synth import spherical_project_baseline
from . import _kernels


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline in one place."""

    input: str = ""
    tag_size: float = 0.2
    thickness: float = 0.03
    dict_path: str = "builtin"
    gradient_n: int = 20
    gradient_tau: float | None = None        # absolute threshold wins if set
    gradient_quantile: float = 0.9
    cluster_tol: float | None = None         # None: derived from spacing
    min_cluster: int = DEFAULT_MIN_CLUSTER
    max_cluster: int | None = None
    diagonal_margin: float = DIAGONAL_MARGIN
    buffer_mode: str = "floor"
    buffer_scale: float = 2.0
    render_target_px: int = 256
    max_correction: int = 1
    output: str = ""
    debug_dir: str | None = None
    threads: int = 1
    baseline: bool = False
    baseline_theta_deg: float = 0.05

    def validate(self) -> None:
        if not self.input:
            raise ValueError("input path is required")
        if not os.path.exists(self.input):
            raise FileNotFoundError(self.input)
        if self.dict_path != "builtin" and not os.path.exists(self.dict_path):
            raise FileNotFoundError(self.dict_path)
        if self.tag_size <= 0:
            raise ValueError("tag size must be positive")
        if not (0 < self.thickness < self.tag_size):
            raise ValueError("thickness must lie in (0, tag size)")
        if self.threads < 1:
            raise ValueError("thread count must be at least 1")
        if self.buffer_mode not in ("floor", "scale"):
            raise ValueError("buffer mode must be 'floor' or 'scale'")

    def load_dictionary(self) -> TagDictionary:
        if self.dict_path == "builtin":
            return builtin_dictionary()
        return TagDictionary.load(self.dict_path)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        cfg = cls()
        mapping = {f: f for f in (
            "input", "tag_size", "thickness", "gradient_n", "gradient_tau",
            "gradient_quantile", "cluster_tol", "min_cluster", "max_cluster",
            "diagonal_margin", "buffer_mode", "buffer_scale",
            "render_target_px", "max_correction", "output", "debug_dir",
            "threads", "baseline", "baseline_theta_deg")}
        mapping["dict"] = "dict_path"
        for key, val in d.items():
            if key not in mapping:
                raise ValueError(f"unknown config key {key!r}")
            setattr(cfg, mapping[key], val)
        return cfg


def load_config(path: str) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as f:
        return PipelineConfig.from_dict(json.load(f))


# report formatting: everything floats through one %.9g gate


def _fmt_value(x, indent: int) -> str:
    pad = "  " * indent
    if isinstance(x, bool) or isinstance(x, np.bool_):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if not np.isfinite(v):
            raise ValueError("non-finite value in report")
        return format(v, ".9g")
    if isinstance(x, str):
        return json.dumps(x)
    if x is None:
        return "null"
    if isinstance(x, dict):
        if not x:
            return "{}"
        inner = ",\n".join(
            f"{pad}  {json.dumps(str(k))}: {_fmt_value(v, indent + 1)}"
            for k, v in x.items())
        return "{\n" + inner + "\n" + pad + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        seq = list(x)
        if not seq:
            return "[]"
        simple = all(isinstance(v, (bool, int, float, np.integer,
                                    np.floating, np.bool_)) for v in seq)
        if simple:
            return "[" + ", ".join(_fmt_value(v, 0) for v in seq) + "]"
        inner = ",\n".join(f"{pad}  {_fmt_value(v, indent + 1)}" for v in seq)
        return "[\n" + inner + "\n" + pad + "]"
    raise TypeError(f"cannot format {type(x)} for the report")


def format_report(report: dict) -> str:
    return _fmt_value(report, 0) + "\n"


def write_report(report: dict, path: str) -> None:
    text = format_report(report)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _pose_row_major(t: RigidTransform) -> list:
    return [float(v) for v in t.as_matrix().reshape(-1)]


def detection_entry(det: TagDetection) -> dict:
    return {
        "id": det.tag_id,
        "mirrored": det.mirrored,
        "vertices": [
            {"index": i, "x": float(v[0]), "y": float(v[1]), "z": float(v[2])}
            for i, v in enumerate(det.vertices)],
        "pose_row_major": _pose_row_major(det.pose),
        "tag_to_map_row_major": _pose_row_major(det.tag_to_map()),
        "rms_residual": float(det.rms_residual),
    }


def report_to_detections(report: dict) -> list:
    """Rebuild TagDetection objects from a written report."""
    out = []
    for entry in report.get("tags", []):
        mat = np.asarray(entry["pose_row_major"],
                         dtype=np.float64).reshape(4, 4)
        verts = np.array([[v["x"], v["y"], v["z"]]
                          for v in sorted(entry["vertices"],
                                          key=lambda r: r["index"])])
        out.append(TagDetection(
            tag_id=int(entry["id"]),
            mirrored=bool(entry["mirrored"]),
            vertices=verts,
            pose=RigidTransform.from_matrix(mat),
            rms_residual=float(entry["rms_residual"]),
        ))
    return out


# the pipeline proper


def _merge_repeats(detections: list, side: float):
    """Collapse same-id detections of the same physical tag.

    Overlapping candidate boxes can both contain one tag; the copies agree
    to well under a side length.  Keeps the lowest-residual copy.  Same-id
    detections farther apart than a side are left alone (and show up in
    the duplicate_ids diagnostic).
    """
    kept: list = []
    merged = 0
    for det in detections:
        repeat = None
        for i, other in enumerate(kept):
            if other.tag_id != det.tag_id:
                continue
            if np.linalg.norm(other.center() - det.center()) < side:
                repeat = i
                break
        if repeat is None:
            kept.append(det)
        elif det.rms_residual < kept[repeat].rms_residual:
            kept[repeat] = det
            merged += 1
        else:
            merged += 1
    return kept, merged


@dataclass
class CandidateRecord:
    """Walk-through of one cluster candidate for the diagnostics block."""

    cluster_size: int
    extents: list
    l_obb: float = 0.0
    aspect: float = 0.0
    pass_diagonal: bool = False
    pass_aspect: bool = False
    stage: str = "clustered"
    note: str = ""
    detections: list = field(default_factory=list)


def _process_candidate(raw: IntensityCloud, obb, geom: TagGeometry,
                       cfg: PipelineConfig, dictionary: TagDictionary,
                       rec: CandidateRecord, debug_tag: str):
    """Buffered extraction through pose solve for one surviving box."""
    try:
        buf = extract_buffered(raw, obb, geom, cfg.buffer_mode,
                               cfg.buffer_scale)
    except EmptySelectionError as e:
        rec.stage, rec.note = "empty_selection", str(e)
        return []
    plane = reproject_candidate(buf)
    try:
        image = render_intensity_image(plane, side=cfg.tag_size,
                                       geom=None)
    except DegenerateImageError as e:
        rec.stage, rec.note = "degenerate_image", str(e)
        return []
    if cfg.debug_dir:
        write_pgm(image, os.path.join(cfg.debug_dir,
                                      f"candidate_{debug_tag}.pgm"))
    detections, ddiag = decode_image(image, dictionary, cfg.max_correction)
    rec.stage = "decoded" if detections else "no_decode"
    if ddiag.notes:
        rec.note = "; ".join(ddiag.notes)
    out = []
    for det in detections:
        verts = np.stack([
            unproject_pixel(px, image.geom, plane) for px in det.corners_px])
        try:
            tag = assemble_detection(det.tag_id, det.mirrored, verts,
                                     cfg.tag_size, cfg.thickness)
        except MapTagError as e:
            rec.note = (rec.note + "; " if rec.note else "") + str(e)
            continue
        rec.detections.append(det.tag_id)
        out.append(tag)
    return out


def run_pipeline(cfg: PipelineConfig):
    """Run all stages; returns (report dict, detections).

    The report is fully deterministic for a given input and configuration:
    candidate slots are indexed, so thread scheduling cannot reorder it.
    """
    cfg.validate()
    dictionary = cfg.load_dictionary()
    geom = TagGeometry(side=cfg.tag_size, thickness=cfg.thickness)
    if cfg.debug_dir:
        os.makedirs(cfg.debug_dir, exist_ok=True)

    raw = load_pcd(cfg.input)
    index = SpatialIndex(raw)
    params = DownsampleParams(
        n_neighbors=cfg.gradient_n,
        tau=cfg.gradient_tau,
        quantile=cfg.gradient_quantile,
        relative_mode=cfg.gradient_tau is None,
    )
    down, kept_idx, ddiag = downsample_by_gradient(raw, params, index)
    diagnostics = {
        "points_total": len(raw),
        "points_kept": len(down),
        "degenerate_neighborhoods": ddiag.degenerate_skips,
        "effective_tau": float(ddiag.effective_tau),
    }
    detections: list[TagDetection] = []
    records: list[CandidateRecord] = []

    if len(down) >= max(3, cfg.min_cluster):
        dindex = SpatialIndex(down)
        tol = cfg.cluster_tol
        if tol is None:
            tol = default_cluster_tolerance(dindex)
        diagnostics["cluster_tolerance"] = float(tol)
        clusters = euclidean_cluster(down, tol, cfg.min_cluster,
                                     cfg.max_cluster, dindex)
        diagnostics["clusters"] = len(clusters)

        obbs = []
        for cl in clusters:
            rec = CandidateRecord(cluster_size=len(cl.indices), extents=[])
            records.append(rec)
            try:
                obb = compute_obb(down, cl)
            except DegenerateClusterError as e:
                rec.stage, rec.note = "degenerate_cluster", str(e)
                obbs.append(None)
                continue
            rec.extents = [float(v) for v in obb.extents]
            obbs.append(obb)

        boxes = [o for o in obbs if o is not None]
        kept, fdiags = filter_candidates(boxes, geom, cfg.diagonal_margin)
        fit = iter(fdiags)
        survivor_ids = []
        for i, obb in enumerate(obbs):
            if obb is None:
                continue
            fd = next(fit)
            rec = records[i]
            rec.l_obb = float(fd.l_obb)
            rec.aspect = float(fd.aspect) if np.isfinite(fd.aspect) else -1.0
            rec.pass_diagonal = bool(fd.pass_diagonal)
            rec.pass_aspect = bool(fd.pass_aspect)
            if fd.pass_diagonal and fd.pass_aspect:
                rec.stage = "filtered"
                survivor_ids.append(i)
            else:
                rec.stage = "rejected_criteria"
        diagnostics["criteria_survivors"] = len(survivor_ids)

        def work(slot: int):
            i = survivor_ids[slot]
            return _process_candidate(raw, obbs[i], geom, cfg, dictionary,
                                      records[i], f"{i:03d}")

        results: list = [None] * len(survivor_ids)
        if cfg.threads > 1 and len(survivor_ids) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                for slot, res in enumerate(pool.map(work,
                                                    range(len(survivor_ids)))):
                    results[slot] = res
        else:
            for slot in range(len(survivor_ids)):
                results[slot] = work(slot)
        for res in results:
            detections.extend(res)

        if cfg.debug_dir:
            save_pcd(down, os.path.join(cfg.debug_dir, "downsampled.pcd"))
            manifest = [{
                "cluster_size": r.cluster_size,
                "extents": r.extents,
                "stage": r.stage,
            } for r in records]
            with open(os.path.join(cfg.debug_dir, "clusters.json"), "w",
                      encoding="utf-8") as f:
                json.dump(manifest, f, indent=2)
    else:
        diagnostics["clusters"] = 0
        diagnostics["criteria_survivors"] = 0

    detections, merged = _merge_repeats(detections, cfg.tag_size)
    diagnostics["merged_repeats"] = merged
    ids = [d.tag_id for d in detections]
    diagnostics["duplicate_ids"] = sorted(
        {i for i in ids if ids.count(i) > 1})
    diagnostics["candidates"] = [{
        "cluster_size": r.cluster_size,
        "extents": r.extents,
        "l_obb": r.l_obb,
        "aspect": r.aspect,
        "pass_diagonal": r.pass_diagonal,
        "pass_aspect": r.pass_aspect,
        "stage": r.stage,
        "note": r.note,
        "decoded_ids": r.detections,
    } for r in records]

    report = {
        "mode": "pipeline",
        "tags": [detection_entry(d) for d in detections],
        "diagnostics": diagnostics,
    }
    if cfg.output:
        write_report(report, cfg.output)
    return report, detections


def run_baseline(cfg: PipelineConfig):
    """Single global spherical projection from the map origin, then decode.

    The comparison mode the pipeline is measured against: no reseating, so
    surfaces scanned from different viewpoints overlap in the image.  Tag
    vertices are recovered by intersecting corner rays with a plane fitted
    to the points behind the decoded quad.
    """
    cfg.validate()
    dictionary = cfg.load_dictionary()
    raw = load_pcd(cfg.input)
    theta = np.radians(cfg.baseline_theta_deg)

    az = np.arctan2(raw.xyz[:, 1], raw.xyz[:, 0])
    incl = np.arctan2(raw.xyz[:, 2], np.hypot(raw.xyz[:, 0], raw.xyz[:, 1]))
    ub = _kernels.round_half_away(az / theta)
    vb = _kernels.round_half_away(incl / theta)
    geom = ImageGeometry(
        theta_az=theta, theta_incl=theta,
        u_offset=int(-ub.min()), v_offset=int(-vb.min()),
        width=int(ub.max() - ub.min()) + 1,
        height=int(vb.max() - vb.min()) + 1,
    )
    image = spherical_project_baseline(raw, geom)
    if cfg.debug_dir:
        os.makedirs(cfg.debug_dir, exist_ok=True)
        write_pgm(image, os.path.join(cfg.debug_dir, "baseline.pgm"))
    dets, ddiag = decode_image(image, dictionary, cfg.max_correction)

    detections = []
    notes = list(ddiag.notes)
    for det in dets:
        # plane from the 3D points that built the quad's pixels
        poly = det.quad_px
        umin = int(np.floor(poly[:, 0].min()))
        umax = int(np.ceil(poly[:, 0].max())) + 1
        vmin = int(np.floor(poly[:, 1].min()))
        vmax = int(np.ceil(poly[:, 1].max())) + 1
        src = image.source[max(vmin, 0):vmax, max(umin, 0):umax]
        src = src[src >= 0]
        if src.size < 16:
            notes.append(f"id {det.tag_id}: too few source points")
            continue
        pts = raw.xyz[np.unique(src)]
        centroid = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - centroid)
        normal = vt[-1]
        verts = []
        for u, v in det.corners_px:
            d = np.array([
                np.cos((v - geom.v_offset) * theta) *
                np.cos((u - geom.u_offset) * theta),
                np.cos((v - geom.v_offset) * theta) *
                np.sin((u - geom.u_offset) * theta),
                np.sin((v - geom.v_offset) * theta)])
            denom = d @ normal
            if abs(denom) < 1e-12:
                break
            verts.append((centroid @ normal) / denom * d)
        if len(verts) != 4:
            notes.append(f"id {det.tag_id}: corner ray parallel to plane")
            continue
        try:
            tag = assemble_detection(det.tag_id, det.mirrored,
                                     np.stack(verts), cfg.tag_size,
                                     cfg.thickness)
        except MapTagError as e:
            notes.append(f"id {det.tag_id}: {e}")
            continue
        detections.append(tag)

    report = {
        "mode": "baseline",
        "tags": [detection_entry(d) for d in detections],
        "diagnostics": {
            "points_total": len(raw),
            "image_size": [geom.width, geom.height],
            "quads_found": ddiag.quads_found,
            "frame_failures": ddiag.frame_failures,
            "unmatched": ddiag.unmatched,
            "notes": notes,
        },
    }
    if cfg.output:
        write_report(report, cfg.output)
    return report, detections
