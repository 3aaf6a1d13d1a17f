"""Hot numeric kernels: voxel-grid k-NN, clustering, gradient fits, rasterization.

Every kernel has two implementations: a numba ``@njit`` loop and a pure-numpy
fallback.  The fallback is selected automatically when numba is unavailable,
or explicitly by setting the environment variable ``MAPTAG_DISABLE_NUMBA=1``
before import.  Both paths are deterministic; ties everywhere break toward
the smaller point index.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

_FLAG = os.environ.get("MAPTAG_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG in {"1", "true", "yes", "on"}

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by MAPTAG_DISABLE_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover - exercised via env flag in CI
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):
        # identity decorator so the numba source still imports
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


# ---------------------------------------------------------------------------
# voxel grid


@dataclass
class VoxelGrid:
    """Uniform grid over a point set, stored CSR-style over occupied cells.

    ``order`` lists point indices sorted by cell key (stable, so indices stay
    ascending within a cell); ``keys`` is the sorted array of occupied cell
    keys with ``starts``/``counts`` giving each cell's slice of ``order``.
    """

    xyz: np.ndarray
    cell_size: float
    origin: np.ndarray
    dims: np.ndarray
    keys: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    order: np.ndarray
    # open-addressing key -> slot table; much faster than bisecting `keys`
    # in the k-NN inner loop (one or two probes beat 17 cache misses)
    table_keys: np.ndarray = None
    table_pos: np.ndarray = None
    # coordinates pre-gathered in `order` order: candidate scans stream
    # through memory instead of chasing indices all over the cloud
    xyz_sorted: np.ndarray = None


_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)


def _build_hash(keys: np.ndarray):
    """Linear-probing insert, vectorized in rounds.

    A key only advances past a slot that is already occupied, so no probe
    chain ever crosses an empty slot and lookups can stop at the first -1.
    """
    m = 16
    while m < 2 * len(keys):
        m *= 2
    shift = np.uint64(64 - int(np.log2(m)))
    table_keys = np.full(m, -1, np.int64)
    table_pos = np.zeros(m, np.int64)
    mask = m - 1
    cur = ((keys.astype(np.uint64) * _HASH_MULT) >> shift).astype(np.int64)
    pending = np.arange(len(keys), dtype=np.int64)
    while pending.size:
        slots = cur[pending]
        order = np.argsort(slots, kind="stable")
        ss = slots[order]
        first = np.ones(len(ss), dtype=bool)
        first[1:] = ss[1:] != ss[:-1]
        cand = pending[order[first]]
        free = table_keys[cur[cand]] == -1
        placed = cand[free]
        table_keys[cur[placed]] = keys[placed]
        table_pos[cur[placed]] = placed
        done = np.zeros(len(keys), dtype=bool)
        done[placed] = True
        pending = pending[~done[pending]]
        cur[pending] = (cur[pending] + 1) & mask
    return table_keys, table_pos


def _choose_cell_size(xyz: np.ndarray, target: float = 6.0) -> float:
    """Pick a cell size giving a few points per occupied cell.

    Iterative because point sets may be volumetric or surface-like; the
    refinement exponent 1/2 assumes the common LiDAR case (points on 2D
    surfaces) and converges in a few steps either way.
    """
    n = xyz.shape[0]
    mn = xyz.min(axis=0)
    mx = xyz.max(axis=0)
    diag = float(np.linalg.norm(mx - mn))
    if diag <= 0.0:
        return 1.0
    cell = 1.5 * diag / max(float(n) ** (1.0 / 3.0), 2.0)
    floor = diag / 2000.0  # keeps integer cell coordinates comfortably in range
    cell = max(cell, floor)
    for _ in range(4):
        idx = np.floor((xyz - mn) / cell).astype(np.int64)
        dims = idx.max(axis=0) + 1
        keys = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
        avg = n / np.unique(keys).size
        if 2.0 <= avg <= 3.0 * target:
            break
        factor = float(np.clip(np.sqrt(target / avg), 0.25, 4.0))
        if abs(factor - 1.0) < 0.05:
            break
        cell = max(cell * factor, floor)
    return float(cell)


def build_grid(xyz: np.ndarray, cell_size: float | None = None) -> VoxelGrid:
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    if xyz.shape[0] == 0:
        raise ValueError("cannot build a grid over zero points")
    if cell_size is None:
        cell_size = _choose_cell_size(xyz)
    cell_size = float(cell_size)
    origin = xyz.min(axis=0) - 0.5 * cell_size
    idx = np.floor((xyz - origin) / cell_size).astype(np.int64)
    dims = idx.max(axis=0) + 1
    keys_all = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    order = np.argsort(keys_all, kind="stable")
    keys, starts, counts = np.unique(
        keys_all[order], return_index=True, return_counts=True
    )
    keys = keys.astype(np.int64)
    table_keys, table_pos = _build_hash(keys)
    return VoxelGrid(
        xyz=xyz,
        cell_size=cell_size,
        origin=origin,
        dims=dims.astype(np.int64),
        keys=keys,
        starts=starts.astype(np.int64),
        counts=counts.astype(np.int64),
        order=order.astype(np.int64),
        table_keys=table_keys,
        table_pos=table_pos,
        xyz_sorted=np.ascontiguousarray(xyz[order]),
    )


# ---------------------------------------------------------------------------
# k nearest neighbors


@njit(cache=True)
def _knn_query_nb(xyz_sorted, origin, cell, dims, table_keys, table_pos,
                  starts, counts, order, qx, qy, qz, k, out_idx, out_d2):
    # one flat function on purpose: a per-cell helper call costs more than
    # the cell scan itself at these cell populations
    ax = int(np.floor((qx - origin[0]) / cell))
    ay = int(np.floor((qy - origin[1]) / cell))
    az = int(np.floor((qz - origin[2]) / cell))
    rmax = 0
    for d in range(3):
        a = ax if d == 0 else (ay if d == 1 else az)
        hi = dims[d] - 1
        m = abs(a) if abs(a) > abs(hi - a) else abs(hi - a)
        if m > rmax:
            rmax = m
    hmask = table_keys.shape[0] - 1
    hshift = 64 - int(np.log2(np.float64(table_keys.shape[0])))
    nf = 0
    sat_rings = 0
    r = 0
    while True:
        # Chebyshev shell at radius r, clipped to the grid: two x faces
        # (full y/z extent), two y faces (interior x), two z faces
        # (interior x and y); r = 0 degenerates to the anchor cell
        for s in range(2):
            if s == 1 and r == 0:
                break
            cx = ax - r if s == 0 else ax + r
            if cx < 0 or cx >= dims[0]:
                continue
            y0 = ay - r if ay - r > 0 else 0
            y1 = ay + r if ay + r < dims[1] - 1 else dims[1] - 1
            z0 = az - r if az - r > 0 else 0
            z1 = az + r if az + r < dims[2] - 1 else dims[2] - 1
            for cy in range(y0, y1 + 1):
                for cz in range(z0, z1 + 1):
                    if nf >= k:
                        # skip cells that cannot beat the current kth distance (ties
                        # must still be scanned: equal-distance lower-index points win)
                        lo = origin[0] + cx * cell
                        bx = lo - qx if qx < lo else (qx - lo - cell if qx > lo + cell else 0.0)
                        lo = origin[1] + cy * cell
                        by = lo - qy if qy < lo else (qy - lo - cell if qy > lo + cell else 0.0)
                        lo = origin[2] + cz * cell
                        bz = lo - qz if qz < lo else (qz - lo - cell if qz > lo + cell else 0.0)
                        if bx * bx + by * by + bz * bz > out_d2[k - 1]:
                            continue
                    key = (cx * dims[1] + cy) * dims[2] + cz
                    h = np.int64((np.uint64(key) * np.uint64(0x9E3779B97F4A7C15))
                                 >> np.uint64(hshift))
                    pos = np.int64(-1)
                    while True:
                        tk = table_keys[h]
                        if tk == key:
                            pos = table_pos[h]
                            break
                        if tk == -1:
                            break
                        h = (h + np.int64(1)) & hmask
                    if pos < 0:
                        continue
                    for t in range(starts[pos], starts[pos] + counts[pos]):
                        dx = xyz_sorted[t, 0] - qx
                        dy = xyz_sorted[t, 1] - qy
                        dz = xyz_sorted[t, 2] - qz
                        d2 = dx * dx + dy * dy + dz * dz
                        if nf >= k and d2 > out_d2[k - 1]:
                            continue
                        pi = order[t]
                        if nf < k:
                            j = nf
                            while j > 0 and (out_d2[j - 1] > d2 or
                                             (out_d2[j - 1] == d2 and out_idx[j - 1] > pi)):
                                out_d2[j] = out_d2[j - 1]
                                out_idx[j] = out_idx[j - 1]
                                j -= 1
                            out_d2[j] = d2
                            out_idx[j] = pi
                            nf += 1
                        elif d2 < out_d2[k - 1] or pi < out_idx[k - 1]:
                            j = k - 1
                            while j > 0 and (out_d2[j - 1] > d2 or
                                             (out_d2[j - 1] == d2 and out_idx[j - 1] > pi)):
                                out_d2[j] = out_d2[j - 1]
                                out_idx[j] = out_idx[j - 1]
                                j -= 1
                            out_d2[j] = d2
                            out_idx[j] = pi
        for s in range(2):
            if r == 0:
                break
            cy = ay - r if s == 0 else ay + r
            if cy < 0 or cy >= dims[1]:
                continue
            x0 = ax - r + 1 if ax - r + 1 > 0 else 0
            x1 = ax + r - 1 if ax + r - 1 < dims[0] - 1 else dims[0] - 1
            z0 = az - r if az - r > 0 else 0
            z1 = az + r if az + r < dims[2] - 1 else dims[2] - 1
            for cx in range(x0, x1 + 1):
                for cz in range(z0, z1 + 1):
                    if nf >= k:
                        # skip cells that cannot beat the current kth distance (ties
                        # must still be scanned: equal-distance lower-index points win)
                        lo = origin[0] + cx * cell
                        bx = lo - qx if qx < lo else (qx - lo - cell if qx > lo + cell else 0.0)
                        lo = origin[1] + cy * cell
                        by = lo - qy if qy < lo else (qy - lo - cell if qy > lo + cell else 0.0)
                        lo = origin[2] + cz * cell
                        bz = lo - qz if qz < lo else (qz - lo - cell if qz > lo + cell else 0.0)
                        if bx * bx + by * by + bz * bz > out_d2[k - 1]:
                            continue
                    key = (cx * dims[1] + cy) * dims[2] + cz
                    h = np.int64((np.uint64(key) * np.uint64(0x9E3779B97F4A7C15))
                                 >> np.uint64(hshift))
                    pos = np.int64(-1)
                    while True:
                        tk = table_keys[h]
                        if tk == key:
                            pos = table_pos[h]
                            break
                        if tk == -1:
                            break
                        h = (h + np.int64(1)) & hmask
                    if pos < 0:
                        continue
                    for t in range(starts[pos], starts[pos] + counts[pos]):
                        dx = xyz_sorted[t, 0] - qx
                        dy = xyz_sorted[t, 1] - qy
                        dz = xyz_sorted[t, 2] - qz
                        d2 = dx * dx + dy * dy + dz * dz
                        if nf >= k and d2 > out_d2[k - 1]:
                            continue
                        pi = order[t]
                        if nf < k:
                            j = nf
                            while j > 0 and (out_d2[j - 1] > d2 or
                                             (out_d2[j - 1] == d2 and out_idx[j - 1] > pi)):
                                out_d2[j] = out_d2[j - 1]
                                out_idx[j] = out_idx[j - 1]
                                j -= 1
                            out_d2[j] = d2
                            out_idx[j] = pi
                            nf += 1
                        elif d2 < out_d2[k - 1] or pi < out_idx[k - 1]:
                            j = k - 1
                            while j > 0 and (out_d2[j - 1] > d2 or
                                             (out_d2[j - 1] == d2 and out_idx[j - 1] > pi)):
                                out_d2[j] = out_d2[j - 1]
                                out_idx[j] = out_idx[j - 1]
                                j -= 1
                            out_d2[j] = d2
                            out_idx[j] = pi
        for s in range(2):
            if r == 0:
                break
            cz = az - r if s == 0 else az + r
            if cz < 0 or cz >= dims[2]:
                continue
            x0 = ax - r + 1 if ax - r + 1 > 0 else 0
            x1 = ax + r - 1 if ax + r - 1 < dims[0] - 1 else dims[0] - 1
            y0 = ay - r + 1 if ay - r + 1 > 0 else 0
            y1 = ay + r - 1 if ay + r - 1 < dims[1] - 1 else dims[1] - 1
            for cx in range(x0, x1 + 1):
                for cy in range(y0, y1 + 1):
                    if nf >= k:
                        # skip cells that cannot beat the current kth distance (ties
                        # must still be scanned: equal-distance lower-index points win)
                        lo = origin[0] + cx * cell
                        bx = lo - qx if qx < lo else (qx - lo - cell if qx > lo + cell else 0.0)
                        lo = origin[1] + cy * cell
                        by = lo - qy if qy < lo else (qy - lo - cell if qy > lo + cell else 0.0)
                        lo = origin[2] + cz * cell
                        bz = lo - qz if qz < lo else (qz - lo - cell if qz > lo + cell else 0.0)
                        if bx * bx + by * by + bz * bz > out_d2[k - 1]:
                            continue
                    key = (cx * dims[1] + cy) * dims[2] + cz
                    h = np.int64((np.uint64(key) * np.uint64(0x9E3779B97F4A7C15))
                                 >> np.uint64(hshift))
                    pos = np.int64(-1)
                    while True:
                        tk = table_keys[h]
                        if tk == key:
                            pos = table_pos[h]
                            break
                        if tk == -1:
                            break
                        h = (h + np.int64(1)) & hmask
                    if pos < 0:
                        continue
                    for t in range(starts[pos], starts[pos] + counts[pos]):
                        dx = xyz_sorted[t, 0] - qx
                        dy = xyz_sorted[t, 1] - qy
                        dz = xyz_sorted[t, 2] - qz
                        d2 = dx * dx + dy * dy + dz * dz
                        if nf >= k and d2 > out_d2[k - 1]:
                            continue
                        pi = order[t]
                        if nf < k:
                            j = nf
                            while j > 0 and (out_d2[j - 1] > d2 or
                                             (out_d2[j - 1] == d2 and out_idx[j - 1] > pi)):
                                out_d2[j] = out_d2[j - 1]
                                out_idx[j] = out_idx[j - 1]
                                j -= 1
                            out_d2[j] = d2
                            out_idx[j] = pi
                            nf += 1
                        elif d2 < out_d2[k - 1] or pi < out_idx[k - 1]:
                            j = k - 1
                            while j > 0 and (out_d2[j - 1] > d2 or
                                             (out_d2[j - 1] == d2 and out_idx[j - 1] > pi)):
                                out_d2[j] = out_d2[j - 1]
                                out_idx[j] = out_idx[j - 1]
                                j -= 1
                            out_d2[j] = d2
                            out_idx[j] = pi
        if nf >= k and out_d2[k - 1] <= (r * cell) * (r * cell):
            # one extra ring guarantees exact results even on distance ties
            sat_rings += 1
            if sat_rings >= 2:
                break
        if r >= rmax:
            break
        r += 1
    return nf


@njit(cache=True)
def _knn_batch_nb(xyz_sorted, origin, cell, dims, table_keys, table_pos,
                  starts, counts, order, queries, k):
    m = queries.shape[0]
    out_idx = np.full((m, k), -1, np.int64)
    out_d2 = np.full((m, k), np.inf, np.float64)
    found = np.empty(m, np.int64)
    for i in range(m):
        found[i] = _knn_query_nb(xyz_sorted, origin, cell, dims, table_keys,
                                 table_pos, starts, counts, order,
                                 queries[i, 0], queries[i, 1], queries[i, 2],
                                 k, out_idx[i], out_d2[i])
    return out_idx, out_d2, found


def _shell_ranges(grid: VoxelGrid, ax: int, ay: int, az: int, r: int):
    """Candidate (start, count) slices for every occupied cell on a shell."""
    dims = grid.dims
    cells = []
    if r == 0:
        cells.append((ax, ay, az))
    else:
        for cx in (ax - r, ax + r):
            if 0 <= cx < dims[0]:
                for cy in range(max(ay - r, 0), min(ay + r, dims[1] - 1) + 1):
                    for cz in range(max(az - r, 0), min(az + r, dims[2] - 1) + 1):
                        cells.append((cx, cy, cz))
        for cy in (ay - r, ay + r):
            if 0 <= cy < dims[1]:
                for cx in range(max(ax - r + 1, 0), min(ax + r - 1, dims[0] - 1) + 1):
                    for cz in range(max(az - r, 0), min(az + r, dims[2] - 1) + 1):
                        cells.append((cx, cy, cz))
        for cz in (az - r, az + r):
            if 0 <= cz < dims[2]:
                for cx in range(max(ax - r + 1, 0), min(ax + r - 1, dims[0] - 1) + 1):
                    for cy in range(max(ay - r + 1, 0), min(ay + r - 1, dims[1] - 1) + 1):
                        cells.append((cx, cy, cz))
    if not cells:
        return []
    arr = np.asarray(cells, dtype=np.int64)
    ks = (arr[:, 0] * dims[1] + arr[:, 1]) * dims[2] + arr[:, 2]
    pos = np.searchsorted(grid.keys, ks)
    ok = (pos < grid.keys.size) & (grid.keys[np.minimum(pos, grid.keys.size - 1)] == ks)
    return [(grid.starts[p], grid.counts[p]) for p in pos[ok]]


def _knn_batch_np(grid: VoxelGrid, queries: np.ndarray, k: int):
    """Vectorized fallback: queries grouped by anchor cell share ring scans."""
    xyz = grid.xyz
    cell = grid.cell_size
    m = queries.shape[0]
    out_idx = np.full((m, k), -1, np.int64)
    out_d2 = np.full((m, k), np.inf, np.float64)
    found = np.zeros(m, np.int64)
    qcell = np.floor((queries - grid.origin) / cell).astype(np.int64)
    qorder = np.lexsort((qcell[:, 2], qcell[:, 1], qcell[:, 0]))
    rmax_grid = int(grid.dims.max())
    i = 0
    while i < m:
        j = i
        a = qcell[qorder[i]]
        while j < m and np.array_equal(qcell[qorder[j]], a):
            j += 1
        qsel = qorder[i:j]
        q = queries[qsel]  # (Q, 3)
        ax, ay, az = int(a[0]), int(a[1]), int(a[2])
        rmax = 0
        for d in range(3):
            av = (ax, ay, az)[d]
            rmax = max(rmax, abs(av), abs(int(grid.dims[d]) - 1 - av))
        cand: list[np.ndarray] = []
        ncand = 0
        sat_rings = 0
        r = 0
        while True:
            for start, count in _shell_ranges(grid, ax, ay, az, r):
                cand.append(grid.order[start:start + count])
                ncand += count
            if ncand > 0:
                ci = np.concatenate(cand)
                diff = xyz[ci][None, :, :] - q[:, None, :]
                d2 = (diff * diff).sum(axis=-1)  # (Q, C)
                if ncand >= k:
                    worst = np.partition(d2, k - 1, axis=1)[:, k - 1]
                    if np.all(worst <= (r * cell) ** 2):
                        sat_rings += 1
                        if sat_rings >= 2:
                            break
            if r >= rmax:
                break
            r += 1
        if ncand > 0:
            ci = np.concatenate(cand)
            diff = xyz[ci][None, :, :] - q[:, None, :]
            d2 = (diff * diff).sum(axis=-1)
            kk = min(k, ncand)
            for t in range(len(qsel)):
                sel = np.lexsort((ci, d2[t]))[:kk]
                out_idx[qsel[t], :kk] = ci[sel]
                out_d2[qsel[t], :kk] = d2[t][sel]
                found[qsel[t]] = kk
        i = j
        _ = rmax_grid
    return out_idx, out_d2, found


def knn_batch(grid: VoxelGrid, queries: np.ndarray, k: int):
    """k nearest neighbors for each query row; ``k`` is clamped to N.

    Returns (indices (M,k), squared distances (M,k), found (M,)).  Rows are
    sorted by (distance, index); unused slots hold -1 / inf.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    k = int(min(k, grid.xyz.shape[0]))
    if k <= 0:
        raise ValueError("k must be positive")
    if NUMBA_ENABLED:
        return _knn_batch_nb(grid.xyz_sorted, grid.origin, grid.cell_size,
                             grid.dims, grid.table_keys, grid.table_pos,
                             grid.starts, grid.counts, grid.order, queries, k)
    return _knn_batch_np(grid, queries, k)


# ---------------------------------------------------------------------------
# euclidean clustering


@njit(cache=True)
def _cluster_labels_nb(xyz, origin, cell, dims, keys, starts, counts, order, tol):
    n = xyz.shape[0]
    labels = np.full(n, -1, np.int64)
    queue = np.empty(n, np.int64)
    reach = int(np.ceil(tol / cell))
    tol2 = tol * tol
    lbl = 0
    for seed in range(n):
        if labels[seed] >= 0:
            continue
        labels[seed] = lbl
        queue[0] = seed
        head = 0
        tail = 1
        while head < tail:
            p = queue[head]
            head += 1
            px = xyz[p, 0]
            py = xyz[p, 1]
            pz = xyz[p, 2]
            ax = int(np.floor((px - origin[0]) / cell))
            ay = int(np.floor((py - origin[1]) / cell))
            az = int(np.floor((pz - origin[2]) / cell))
            x0 = ax - reach if ax - reach > 0 else 0
            x1 = ax + reach if ax + reach < dims[0] - 1 else dims[0] - 1
            y0 = ay - reach if ay - reach > 0 else 0
            y1 = ay + reach if ay + reach < dims[1] - 1 else dims[1] - 1
            z0 = az - reach if az - reach > 0 else 0
            z1 = az + reach if az + reach < dims[2] - 1 else dims[2] - 1
            for cx in range(x0, x1 + 1):
                for cy in range(y0, y1 + 1):
                    for cz in range(z0, z1 + 1):
                        key = (cx * dims[1] + cy) * dims[2] + cz
                        pos = np.searchsorted(keys, key)
                        if pos >= keys.shape[0] or keys[pos] != key:
                            continue
                        for t in range(starts[pos], starts[pos] + counts[pos]):
                            qi = order[t]
                            if labels[qi] >= 0:
                                continue
                            dx = xyz[qi, 0] - px
                            dy = xyz[qi, 1] - py
                            dz = xyz[qi, 2] - pz
                            d2 = dx * dx
                            d2 += dy * dy
                            d2 += dz * dz
                            if d2 <= tol2:
                                labels[qi] = lbl
                                queue[tail] = qi
                                tail += 1
        lbl += 1
    return labels


def _cluster_labels_np(grid: VoxelGrid, tol: float) -> np.ndarray:
    xyz = grid.xyz
    n = xyz.shape[0]
    labels = np.full(n, -1, np.int64)
    reach = int(np.ceil(tol / grid.cell_size))
    tol2 = tol * tol
    dims = grid.dims
    lbl = 0
    for seed in range(n):
        if labels[seed] >= 0:
            continue
        labels[seed] = lbl
        queue = [seed]
        while queue:
            p = queue.pop()
            pc = np.floor((xyz[p] - grid.origin) / grid.cell_size).astype(np.int64)
            ranges = []
            for cx in range(max(pc[0] - reach, 0), min(pc[0] + reach, dims[0] - 1) + 1):
                for cy in range(max(pc[1] - reach, 0), min(pc[1] + reach, dims[1] - 1) + 1):
                    for cz in range(max(pc[2] - reach, 0), min(pc[2] + reach, dims[2] - 1) + 1):
                        key = (cx * dims[1] + cy) * dims[2] + cz
                        pos = int(np.searchsorted(grid.keys, key))
                        if pos < grid.keys.size and grid.keys[pos] == key:
                            s = grid.starts[pos]
                            ranges.append(grid.order[s:s + grid.counts[pos]])
            if not ranges:
                continue
            cand = np.concatenate(ranges)
            cand = cand[labels[cand] < 0]
            if cand.size == 0:
                continue
            diff = xyz[cand] - xyz[p]
            hit = cand[(diff * diff).sum(axis=1) <= tol2]
            labels[hit] = lbl
            queue.extend(hit.tolist())
        lbl += 1
    return labels


def cluster_labels(grid: VoxelGrid, tol: float) -> np.ndarray:
    """Connected-component labels linking points within ``tol`` (inclusive)."""
    if NUMBA_ENABLED:
        return _cluster_labels_nb(grid.xyz, grid.origin, grid.cell_size,
                                  grid.dims, grid.keys, grid.starts,
                                  grid.counts, grid.order, float(tol))
    return _cluster_labels_np(grid, float(tol))


# ---------------------------------------------------------------------------
# local linear intensity models


@njit(cache=True)
def _fit_gradients_nb(xyz, intens, nbr, eps_rel):
    n_pts, n = nbr.shape
    A = np.zeros((n_pts, 3))
    b = np.zeros(n_pts)
    degen = np.zeros(n_pts, np.bool_)
    for i in range(n_pts):
        cx = 0.0
        cy = 0.0
        cz = 0.0
        ib = 0.0
        for j in range(n):
            p = nbr[i, j]
            cx += xyz[p, 0]
            cy += xyz[p, 1]
            cz += xyz[p, 2]
            ib += intens[p]
        cx /= n
        cy /= n
        cz /= n
        ib /= n
        c00 = 0.0
        c01 = 0.0
        c02 = 0.0
        c11 = 0.0
        c12 = 0.0
        c22 = 0.0
        g0 = 0.0
        g1 = 0.0
        g2 = 0.0
        for j in range(n):
            p = nbr[i, j]
            dx = xyz[p, 0] - cx
            dy = xyz[p, 1] - cy
            dz = xyz[p, 2] - cz
            di = intens[p] - ib
            c00 += dx * dx
            c01 += dx * dy
            c02 += dx * dz
            c11 += dy * dy
            c12 += dy * dz
            c22 += dz * dz
            g0 += dx * di
            g1 += dy * di
            g2 += dz * di
        C = np.empty((3, 3))
        C[0, 0] = c00
        C[0, 1] = c01
        C[0, 2] = c02
        C[1, 0] = c01
        C[1, 1] = c11
        C[1, 2] = c12
        C[2, 0] = c02
        C[2, 1] = c12
        C[2, 2] = c22
        w, V = np.linalg.eigh(C)
        lmax = w[2]
        b[i] = ib
        if lmax <= 0.0:
            degen[i] = True
            continue
        thr = eps_rel * lmax
        for m in range(3):
            if w[m] > thr:
                proj = V[0, m] * g0 + V[1, m] * g1 + V[2, m] * g2
                coef = proj / w[m]
                A[i, 0] += coef * V[0, m]
                A[i, 1] += coef * V[1, m]
                A[i, 2] += coef * V[2, m]
    return A, b, degen


def _fit_gradients_np(xyz, intens, nbr, eps_rel):
    pts = xyz[nbr]  # (N, n, 3)
    ivals = intens[nbr]  # (N, n)
    centroid = pts.mean(axis=1, keepdims=True)
    xc = pts - centroid
    b = ivals.mean(axis=1)
    di = ivals - b[:, None]
    C = np.einsum("ijk,ijl->ikl", xc, xc)
    g = np.einsum("ijk,ij->ik", xc, di)
    w, V = np.linalg.eigh(C)  # ascending eigenvalues
    lmax = w[:, 2]
    degen = lmax <= 0.0
    thr = eps_rel * lmax
    proj = np.einsum("ikm,ik->im", V, g)
    safe_w = np.where(w > 0.0, w, 1.0)
    coef = np.where(w > thr[:, None], proj / safe_w, 0.0)
    A = np.einsum("ikm,im->ik", V, coef)
    A[degen] = 0.0
    return A, b, degen


def fit_gradients(xyz, intens, nbr, eps_rel=1e-8):
    """Per-point local linear intensity model over given neighbor indices.

    Returns (A (N,3) gradients, b (N) neighborhood mean intensities,
    degenerate (N,) flags for all-coincident neighborhoods).  Rank-deficient
    directions (eigenvalue <= eps_rel * largest) contribute zero gradient.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    intens = np.ascontiguousarray(intens, dtype=np.float64)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    if NUMBA_ENABLED:
        return _fit_gradients_nb(xyz, intens, nbr, float(eps_rel))
    return _fit_gradients_np(xyz, intens, nbr, float(eps_rel))


# ---------------------------------------------------------------------------
# rasterization (nearest range wins per pixel)


@njit(cache=True)
def _rasterize_nb(u, v, rng, intens, width, height):
    values = np.full((height, width), np.nan)
    ranges = np.full((height, width), np.inf)
    source = np.full((height, width), -1, np.int64)
    for i in range(u.shape[0]):
        uu = u[i]
        vv = v[i]
        if uu < 0 or uu >= width or vv < 0 or vv >= height:
            continue
        r = rng[i]
        if r < ranges[vv, uu] or (r == ranges[vv, uu] and
                                  (source[vv, uu] == -1 or i < source[vv, uu])):
            ranges[vv, uu] = r
            values[vv, uu] = intens[i]
            source[vv, uu] = i
    return values, ranges, source


def _rasterize_np(u, v, rng, intens, width, height):
    values = np.full((height, width), np.nan)
    ranges = np.full((height, width), np.inf)
    source = np.full((height, width), -1, np.int64)
    inb = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    if not inb.any():
        return values, ranges, source
    ui = u[inb]
    vi = v[inb]
    ri = rng[inb]
    ii = intens[inb]
    oi = np.nonzero(inb)[0]
    pix = vi * width + ui
    order = np.lexsort((oi, ri, pix))
    pix_s = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    sel = order[first]
    values.reshape(-1)[pix[sel]] = ii[sel]
    ranges.reshape(-1)[pix[sel]] = ri[sel]
    source.reshape(-1)[pix[sel]] = oi[sel]
    return values, ranges, source


def rasterize(u, v, rng, intens, width, height):
    """Scatter points into an image; the nearest range wins each pixel.

    Range ties resolve to the smaller point index.  Returns
    (values, ranges, source) with NaN / inf / -1 in empty pixels.
    """
    u = np.ascontiguousarray(u, dtype=np.int64)
    v = np.ascontiguousarray(v, dtype=np.int64)
    rng = np.ascontiguousarray(rng, dtype=np.float64)
    intens = np.ascontiguousarray(intens, dtype=np.float64)
    if NUMBA_ENABLED:
        return _rasterize_nb(u, v, rng, intens, int(width), int(height))
    return _rasterize_np(u, v, rng, intens, int(width), int(height))


# ---------------------------------------------------------------------------
# z-buffer visibility over angular bins


@njit(cache=True)
def _zbuffer_keep_nb(bins, rng, surf, margin):
    n = bins.shape[0]
    keep = np.ones(n, np.bool_)
    order = np.argsort(bins, kind="mergesort")
    i = 0
    while i < n:
        j = i
        b0 = bins[order[i]]
        while j < n and bins[order[j]] == b0:
            j += 1
        r1 = np.inf
        s1 = -1
        for t in range(i, j):
            p = order[t]
            if rng[p] < r1:
                r1 = rng[p]
                s1 = surf[p]
        r2 = np.inf
        for t in range(i, j):
            p = order[t]
            if surf[p] != s1 and rng[p] < r2:
                r2 = rng[p]
        for t in range(i, j):
            p = order[t]
            ro = r2 if surf[p] == s1 else r1
            if ro < rng[p] - margin:
                keep[p] = False
        i = j
    return keep


def _zbuffer_keep_np(bins, rng, surf, margin):
    n = bins.shape[0]
    order = np.lexsort((np.arange(n), rng, bins))
    bs = bins[order]
    first = np.ones(n, dtype=bool)
    first[1:] = bs[1:] != bs[:-1]
    uniq = bs[first]
    r1 = rng[order][first]
    s1 = surf[order][first]
    g = np.searchsorted(uniq, bins)
    other = surf != s1[g]
    r2 = np.full(uniq.size, np.inf)
    if other.any():
        oi = np.nonzero(other)[0]
        order2 = oi[np.lexsort((oi, rng[oi], bins[oi]))]
        bs2 = bins[order2]
        first2 = np.ones(order2.size, dtype=bool)
        first2[1:] = bs2[1:] != bs2[:-1]
        r2[np.searchsorted(uniq, bs2[first2])] = rng[order2][first2]
    nearest_other = np.where(surf == s1[g], r2[g], r1[g])
    return ~(nearest_other < rng - margin)


def zbuffer_keep(bins, rng, surf, margin=1e-6):
    """Visibility mask: a point survives unless a nearer point of a different
    surface shares its angular bin."""
    bins = np.ascontiguousarray(bins, dtype=np.int64)
    rng = np.ascontiguousarray(rng, dtype=np.float64)
    surf = np.ascontiguousarray(surf, dtype=np.int64)
    if NUMBA_ENABLED:
        return _zbuffer_keep_nb(bins, rng, surf, float(margin))
    return _zbuffer_keep_np(bins, rng, surf, float(margin))


# ---------------------------------------------------------------------------
# hole filling (vectorized; not worth a numba twin)


def hole_fill(values, ranges, source, passes=2, min_neighbors=5):
    """Fill empty pixels that have >= min_neighbors filled 8-neighbors.

    Filled value is the median of the filled neighbors; the source/range are
    inherited from the nearest-range neighbor.  Each pass reads the previous
    pass's state only, so the result is order-independent.
    """
    values = values.copy()
    ranges = ranges.copy()
    source = source.copy()
    h, w = values.shape
    offs = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    for _ in range(passes):
        finite = np.isfinite(values)
        if finite.all():
            break
        pv = np.full((h + 2, w + 2), np.nan)
        pv[1:-1, 1:-1] = values
        pr = np.full((h + 2, w + 2), np.inf)
        pr[1:-1, 1:-1] = ranges
        ps = np.full((h + 2, w + 2), -1, np.int64)
        ps[1:-1, 1:-1] = source
        nv = np.stack([pv[1 + di:h + 1 + di, 1 + dj:w + 1 + dj] for di, dj in offs])
        nr = np.stack([pr[1 + di:h + 1 + di, 1 + dj:w + 1 + dj] for di, dj in offs])
        ns = np.stack([ps[1 + di:h + 1 + di, 1 + dj:w + 1 + dj] for di, dj in offs])
        valid = np.isfinite(nv)
        cnt = valid.sum(axis=0)
        fill = (~finite) & (cnt >= min_neighbors)
        if not fill.any():
            break
        sv = np.sort(np.where(valid, nv, np.inf), axis=0)
        lo_i = np.maximum((cnt - 1) // 2, 0)[None]
        hi_i = (cnt // 2)[None]
        med = (np.take_along_axis(sv, lo_i, 0)[0] + np.take_along_axis(sv, hi_i, 0)[0]) / 2.0
        nearest = np.argmin(nr, axis=0)[None]
        values = np.where(fill, med, values)
        ranges = np.where(fill, np.take_along_axis(nr, nearest, 0)[0], ranges)
        source = np.where(fill, np.take_along_axis(ns, nearest, 0)[0], source)
    return values, ranges, source


def round_half_away(x):
    """Round to nearest integer with halves away from zero (u = round(theta/res))."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0.0, np.floor(x + 0.5), np.ceil(x - 0.5)).astype(np.int64)
