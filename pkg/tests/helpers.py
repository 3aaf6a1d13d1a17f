"""Shared fixtures-in-spirit: oracles and scene builders used across tests."""

import numpy as np

from maptag.synth import SceneSpec, TagSpec, ViewpointSpec, WallSpec


def brute_knn(xyz: np.ndarray, query, k: int):
    """Reference k-NN: full distance sort, ties by ascending index."""
    q = np.asarray(query, dtype=np.float64)
    d2 = ((xyz - q) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(xyz)), d2))[:min(k, len(xyz))]
    return order, np.sqrt(d2[order])


def union_find_clusters(xyz: np.ndarray, tol: float):
    """Reference clustering: union-find over the full pairwise matrix."""
    n = len(xyz)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    d2 = ((xyz[:, None, :] - xyz[None, :, :]) ** 2).sum(axis=-1)
    for i in range(n):
        for j in range(i + 1, n):
            if d2[i, j] <= tol * tol:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def single_tag_spec(distance: float = 3.0, side: float = 0.2,
                    tag_id: int = 0, density: float = 1e5,
                    range_sigma: float = 0.0, wall: float = 1.0,
                    yaw_deg: float = 0.0,
                    wall_intensity: float = 120.0) -> SceneSpec:
    """One tag centered on one wall, scanned head-on from the origin."""
    return SceneSpec(
        walls=[WallSpec(center=np.array([distance, 0.0, 0.0]),
                        normal=np.array([-1.0, 0.0, 0.0]),
                        size=(wall, wall), intensity=wall_intensity)],
        tags=[TagSpec(tag_id=tag_id, wall=0, side=side, yaw_deg=yaw_deg)],
        viewpoints=[ViewpointSpec(origin=np.zeros(3))],
        density=density,
        range_sigma=range_sigma,
        intensity_sigma=0.0,
    )


def occlusion_spec() -> SceneSpec:
    """Two-viewpoint layout: the second tag is hidden from the map origin.

    Identical to configs/occlusion_scene.json except the side wall is kept
    thin so tests run fast; the acceptance test loads the shipped config.
    """
    return SceneSpec(
        walls=[
            WallSpec(center=np.array([3.0, 0.0, 0.0]),
                     normal=np.array([-1.0, 0.0, 0.0]),
                     size=(0.84, 0.63), intensity=60.0, density=7e5),
            WallSpec(center=np.array([7.0, 0.0, 0.0]),
                     normal=np.array([-1.0, 0.0, 0.0]),
                     size=(1.2, 0.9), intensity=60.0, density=1.5e5),
        ],
        tags=[TagSpec(tag_id=7, wall=0, side=0.2),
              TagSpec(tag_id=23, wall=1, side=0.2)],
        viewpoints=[
            ViewpointSpec(origin=np.zeros(3),
                          direction=np.array([1.0, 0.0, 0.0]), fov_deg=40.0),
            ViewpointSpec(origin=np.array([5.0, 0.0, 0.0]),
                          direction=np.array([1.0, 0.0, 0.0]), fov_deg=40.0),
        ],
        density=1e5,
        range_sigma=0.002,
        intensity_sigma=0.0,
    )
