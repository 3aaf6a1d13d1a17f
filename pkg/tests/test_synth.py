"""Synthetic scene generator: sampling, painting, occlusion, scoring."""

import numpy as np
import pytest

from maptag.decoder import builtin_dictionary, decode_image
from maptag.errors import InvalidSpecError
from maptag.geometry import rotation_z
from maptag.pose import assemble_detection, canonical_corners
from maptag.synth import (
    DEFAULT_BLACK,
    DEFAULT_WHITE,
    ZBUFFER_BIN_RAD,
    SceneSpec,
    TagSpec,
    ViewpointSpec,
    WallSpec,
    _angular_bins,
    evaluate,
    load_scene_spec,
    load_truth,
    save_scene_spec,
    save_truth,
    scene_spec_from_dict,
    scene_spec_to_dict,
    spherical_project_baseline,
    synth_scene,
    tag_pose_on_wall,
    window_geometry,
)

from helpers import occlusion_spec, single_tag_spec


def test_wall_points_exactly_planar():
    spec = single_tag_spec(density=2e4)
    cloud, _ = synth_scene(spec, seed=0)
    normal = np.array([-1.0, 0.0, 0.0])
    center = np.array([3.0, 0.0, 0.0])
    dist = (cloud.xyz - center) @ normal
    assert np.abs(dist).max() < 1e-9
    # roughly density * area points survive (nothing occludes one wall)
    assert cloud.xyz.shape[0] == pytest.approx(2e4, rel=0.01)


def test_scene_bit_identical_across_runs():
    spec = occlusion_spec()
    a, _ = synth_scene(spec, seed=5)
    b, _ = synth_scene(spec, seed=5)
    assert np.array_equal(a.xyz, b.xyz)
    assert np.array_equal(a.intensity, b.intensity)
    c, _ = synth_scene(spec, seed=6)
    assert not np.array_equal(a.xyz, c.xyz)


def test_tag_painting_matches_module_oracle():
    side, yaw = 0.2, 17.0
    spec = single_tag_spec(side=side, tag_id=11, density=3e5, yaw_deg=yaw)
    cloud, _ = synth_scene(spec, seed=2)
    code = builtin_dictionary().codes[11]
    n = code.shape[0]
    m = n + 4  # payload plus black frame plus white margin, per side

    # independent repaint: wall plane -> tag-local coords -> module rule
    wall = spec.walls[0].frame()
    local3 = wall.inverse().apply(cloud.xyz)
    assert np.abs(local3[:, 2]).max() < 1e-9
    uv = local3[:, :2]
    tag_local = uv @ rotation_z(np.radians(yaw))[:2, :2]  # inverse yaw
    x, y = tag_local[:, 0], tag_local[:, 1]
    want = np.full(len(uv), 120.0)
    inside = (np.abs(x) <= side / 2) & (np.abs(y) <= side / 2)
    col = np.minimum(np.floor((x[inside] + side / 2) * m / side), m - 1).astype(int)
    row = np.minimum(np.floor((side / 2 - y[inside]) * m / side), m - 1).astype(int)
    ring = np.min([row, col, m - 1 - row, m - 1 - col], axis=0)
    val = np.where(ring == 0, DEFAULT_WHITE, DEFAULT_BLACK)
    pay = ring >= 2
    val[pay] = np.where(code[row[pay] - 2, col[pay] - 2],
                        DEFAULT_WHITE, DEFAULT_BLACK)
    want[inside] = val

    assert np.array_equal(cloud.intensity, want)
    assert inside.sum() > 1000  # the tag actually got sampled


def test_truth_vertices_and_pose():
    spec = single_tag_spec(side=0.2, yaw_deg=30.0)
    _, truth = synth_scene(spec, seed=1, dictionary=builtin_dictionary())
    assert len(truth.tags) == 1
    t = truth.tags[0]
    assert t.tag_id == 0 and t.side == 0.2
    want = t.tag_to_map.apply(canonical_corners(0.2))
    assert np.allclose(t.vertices, want, atol=1e-12)
    # vertices lie on the wall plane x = 3
    assert np.allclose(t.vertices[:, 0], 3.0, atol=1e-12)
    # corner ring is a proper 0.2 square
    sides = np.linalg.norm(np.roll(t.vertices, -1, axis=0) - t.vertices, axis=1)
    assert np.allclose(sides, 0.2, atol=1e-12)
    assert truth.by_id()[0][0] is t


def test_tag_pose_frame_axes():
    spec = single_tag_spec(yaw_deg=0.0)
    pose = tag_pose_on_wall(spec, spec.tags[0])
    R = pose.rotation
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    # tag Z is the wall normal; offset (0,0) pins the center on the wall
    assert np.allclose(R[:, 2], [-1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(pose.translation, [3.0, 0.0, 0.0], atol=1e-12)
    spun = tag_pose_on_wall(single_tag_spec(yaw_deg=90.0),
                            TagSpec(tag_id=0, wall=0, side=0.2, yaw_deg=90.0))
    # yaw turns the in-plane axes but keeps the normal
    assert np.allclose(spun.rotation[:, 2], [-1.0, 0.0, 0.0], atol=1e-12)
    assert np.abs(spun.rotation[:, 0] - R[:, 0]).max() > 0.5


def test_spec_validation():
    ok = single_tag_spec()
    ok.validate(builtin_dictionary())
    with pytest.raises(InvalidSpecError):
        SceneSpec(walls=[], tags=[], viewpoints=ok.viewpoints).validate()
    with pytest.raises(InvalidSpecError):
        SceneSpec(walls=ok.walls, tags=[], viewpoints=[]).validate()
    bad = single_tag_spec()
    bad.density = -1.0
    with pytest.raises(InvalidSpecError):
        bad.validate()
    off_wall = single_tag_spec()
    off_wall.tags[0].offset = (0.45, 0.0)  # sheet would hang over the edge
    with pytest.raises(InvalidSpecError):
        off_wall.validate()
    wrong_wall = single_tag_spec()
    wrong_wall.tags[0].wall = 3
    with pytest.raises(InvalidSpecError):
        wrong_wall.validate()
    big_id = single_tag_spec(tag_id=50)
    with pytest.raises(InvalidSpecError):
        big_id.validate(builtin_dictionary())
    big_id.validate()  # without a dictionary the id range is unknown


def test_no_visible_points_raises():
    spec = single_tag_spec()
    spec.viewpoints = [ViewpointSpec(origin=np.zeros(3),
                                     direction=np.array([-1.0, 0.0, 0.0]),
                                     fov_deg=20.0)]
    with pytest.raises(InvalidSpecError):
        synth_scene(spec, seed=0)


def test_zbuffer_one_surface_per_bin():
    spec = occlusion_spec()
    spec.viewpoints = spec.viewpoints[:1]  # origin only
    spec.range_sigma = 0.0
    cloud, _ = synth_scene(spec, seed=3)
    wall_id = (cloud.xyz[:, 0] > 5.0).astype(int)  # x=3 vs x=7 plane
    bins = _angular_bins(cloud.xyz)
    order = np.argsort(bins, kind="stable")
    b = bins[order]
    w = wall_id[order]
    starts = np.r_[0, np.nonzero(np.diff(b))[0] + 1, len(b)]
    for i, j in zip(starts[:-1], starts[1:]):
        assert len(set(w[i:j].tolist())) == 1


def test_occlusion_hides_back_tag_from_origin():
    # the front wall's angular shadow covers the whole back wall; only bins
    # that happened to get no front-wall sample leak through, and the back
    # tag must end up at least 95% occluded
    spec = occlusion_spec()
    spec.viewpoints = spec.viewpoints[:1]  # origin only
    spec.range_sigma = 0.0
    cloud, truth = synth_scene(spec, seed=3)
    back = truth.by_id()[23][0]
    c = back.tag_to_map.translation
    on_sheet = ((np.abs(cloud.xyz[:, 0] - c[0]) < 1e-6)
                & (np.abs(cloud.xyz[:, 1] - c[1]) <= 0.1)
                & (np.abs(cloud.xyz[:, 2] - c[2]) <= 0.1))
    expected_unoccluded = 0.2 * 0.2 * 1.5e5
    assert on_sheet.sum() < 0.05 * expected_unoccluded


def test_second_viewpoint_fills_the_shadow():
    spec = occlusion_spec()
    spec.range_sigma = 0.0
    cloud, truth = synth_scene(spec, seed=3)
    back_tag = truth.by_id()[23][0]
    near = np.linalg.norm(cloud.xyz - back_tag.tag_to_map.translation,
                          axis=1) < 0.1
    assert near.sum() > 500  # the stitched map covers the hidden tag


def test_window_geometry_centers_target():
    from maptag.reproject import project_pixels
    center = np.array([3.0, 0.4, -0.2])
    geom = window_geometry(center, side=0.2)
    assert geom.width == geom.height
    u, v, _ = project_pixels(center[None, :], geom)
    assert abs(int(u[0]) - geom.width // 2) <= 1
    assert abs(int(v[0]) - geom.height // 2) <= 1
    assert geom.theta_az == ZBUFFER_BIN_RAD
    with pytest.raises(InvalidSpecError):
        window_geometry(np.zeros(3), side=0.2)


def test_baseline_decodes_visible_tag():
    spec = single_tag_spec(density=4e5, tag_id=19)
    cloud, truth = synth_scene(spec, seed=4)
    center = truth.tags[0].tag_to_map.translation
    img = spherical_project_baseline(cloud, window_geometry(center, 0.2))
    dets, _ = decode_image(img, builtin_dictionary())
    assert [d.tag_id for d in dets] == [19]


def test_baseline_misses_occluded_tag():
    # the failure the pipeline exists to fix: a raw projection from the map
    # origin overlays the front wall onto the hidden tag
    spec = occlusion_spec()
    cloud, truth = synth_scene(spec, seed=3)
    back = truth.by_id()[23][0]
    img = spherical_project_baseline(
        cloud, window_geometry(back.tag_to_map.translation, 0.2))
    dets, _ = decode_image(img, builtin_dictionary())
    assert 23 not in [d.tag_id for d in dets]


def test_baseline_source_indices_consistent():
    spec = single_tag_spec(density=1e5)
    cloud, truth = synth_scene(spec, seed=7)
    geom = window_geometry(truth.tags[0].tag_to_map.translation, 0.2)
    img = spherical_project_baseline(cloud, geom, fill_passes=0)
    from maptag.reproject import project_pixels
    vs, us = np.nonzero(np.isfinite(img.values))
    take = slice(0, len(vs), max(1, len(vs) // 200))
    src = img.source[vs[take], us[take]]
    assert (src >= 0).all()
    u2, v2, r2 = project_pixels(cloud.xyz[src], geom)
    assert np.array_equal(u2, us[take]) and np.array_equal(v2, vs[take])
    assert np.allclose(img.ranges[vs[take], us[take]], r2, atol=0)
    assert np.array_equal(img.values[vs[take], us[take]],
                          cloud.intensity[src])


def test_range_noise_moves_points_along_rays():
    clean_spec = single_tag_spec(density=2e4)
    noisy_spec = single_tag_spec(density=2e4, range_sigma=0.01)
    clean, _ = synth_scene(clean_spec, seed=9)
    noisy, _ = synth_scene(noisy_spec, seed=9)
    assert clean.xyz.shape == noisy.xyz.shape
    delta = noisy.xyz - clean.xyz
    ray = clean.xyz / np.linalg.norm(clean.xyz, axis=1, keepdims=True)
    cross = np.linalg.norm(np.cross(delta, ray), axis=1)
    assert cross.max() < 1e-12
    along = np.einsum("ij,ij->i", delta, ray)
    assert np.std(along) == pytest.approx(0.01, rel=0.1)
    assert np.array_equal(clean.intensity, noisy.intensity)


# --------------------------------------------------------------- evaluation


def _det_from_truth(t, thickness=0.03, shift=None, yaw_deg=0.0):
    verts = t.vertices.copy()
    if yaw_deg:
        c = verts.mean(axis=0)
        verts = (verts - c) @ rotation_z(np.radians(yaw_deg)).T + c
    if shift is not None:
        verts = verts + shift
    return assemble_detection(t.tag_id, False, verts, t.side, thickness)


def test_evaluate_perfect_detections():
    spec = occlusion_spec()
    _, truth = synth_scene(spec, seed=0)
    dets = [_det_from_truth(t) for t in truth.tags]
    rep = evaluate(dets, truth)
    assert rep.counts() == "2 / 2"
    assert rep.duplicates == [] and rep.spurious == []
    for s in rep.scores:
        assert s.detected
        assert np.abs(s.translation_error).max() < 1e-9
        assert np.abs(s.rotation_error_deg).max() < 1e-7
        assert s.vertex_rms < 1e-9
        assert s.mirrored is False


def test_evaluate_miss_and_spurious():
    spec = occlusion_spec()
    _, truth = synth_scene(spec, seed=0)
    only_first = [_det_from_truth(truth.tags[0])]
    rep = evaluate(only_first, truth)
    assert rep.counts() == "1 / 2"
    missed = [s for s in rep.scores if not s.detected]
    assert [s.tag_id for s in missed] == [23]
    ghost = _det_from_truth(truth.tags[0])
    ghost.tag_id = 42
    rep = evaluate([ghost], truth)
    assert rep.spurious == [42]
    assert rep.detected == 0


def test_evaluate_echoes_offsets():
    spec = single_tag_spec()
    _, truth = synth_scene(spec, seed=0)
    t = truth.tags[0]
    shifted = _det_from_truth(t, shift=np.array([0.005, -0.002, 0.001]))
    rep = evaluate([shifted], truth)
    s = rep.scores[0]
    assert np.allclose(s.translation_error, [0.005, -0.002, 0.001], atol=1e-9)
    # in-plane turn about the map-frame z axis reads back as pure yaw
    spun = _det_from_truth(t, yaw_deg=1.0)
    rep = evaluate([spun], truth)
    ypr = rep.scores[0].rotation_error_deg
    assert ypr[0] == pytest.approx(1.0, abs=1e-6)
    assert ypr[1] == pytest.approx(0.0, abs=1e-6)
    assert ypr[2] == pytest.approx(0.0, abs=1e-6)


def test_evaluate_flags_duplicates():
    spec = single_tag_spec()
    _, truth = synth_scene(spec, seed=0)
    d1 = _det_from_truth(truth.tags[0])
    d2 = _det_from_truth(truth.tags[0], shift=np.array([0.01, 0, 0]))
    rep = evaluate([d1, d2], truth)
    assert rep.duplicates == [0]
    assert len([s for s in rep.scores if s.detected]) == 2


# ------------------------------------------------------------------ file io


def test_scene_spec_json_round_trip(tmp_path):
    spec = occlusion_spec()
    d = scene_spec_to_dict(spec)
    back = scene_spec_from_dict(d)
    assert scene_spec_to_dict(back) == d
    path = tmp_path / "scene.json"
    save_scene_spec(spec, str(path))
    loaded = load_scene_spec(str(path))
    assert scene_spec_to_dict(loaded) == d
    a, _ = synth_scene(spec, seed=12)
    b, _ = synth_scene(loaded, seed=12)
    assert np.array_equal(a.xyz, b.xyz)


def test_scene_spec_from_dict_rejects_malformed():
    with pytest.raises(InvalidSpecError):
        scene_spec_from_dict({"walls": [{"center": [0, 0, 0]}],
                              "viewpoints": []})


def test_truth_json_round_trip(tmp_path):
    spec = single_tag_spec(yaw_deg=12.5)
    _, truth = synth_scene(spec, seed=0)
    path = tmp_path / "truth.json"
    save_truth(truth, str(path))
    back = load_truth(str(path))
    assert len(back.tags) == 1
    t0, t1 = truth.tags[0], back.tags[0]
    assert t0.tag_id == t1.tag_id and t0.side == t1.side
    assert np.array_equal(t0.vertices, t1.vertices)
    assert np.array_equal(t0.tag_to_map.rotation, t1.tag_to_map.rotation)
    assert np.array_equal(t0.tag_to_map.translation, t1.tag_to_map.translation)
