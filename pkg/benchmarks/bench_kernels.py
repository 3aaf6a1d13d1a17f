#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each hot kernel (k-NN, clustering, gradient fits, rasterization) on the
same synthetic workloads in both modes and prints a timing table.  The numpy
fallback is selected by re-executing this script in a subprocess with
MAPTAG_DISABLE_NUMBA=1, because the mode is fixed at import time.

    python3 benchmarks/bench_kernels.py [--points 200000] [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def build_workload(n_points: int, seed: int = 5):
    """A tag-on-a-wall patch: planar points plus painted intensities."""
    rng = np.random.default_rng(seed)
    side = float(np.sqrt(n_points / 1e5))  # keep density near 1e5 / m^2
    uv = (rng.random((n_points, 2)) - 0.5) * side
    xyz = np.column_stack([np.full(n_points, 3.0), uv])
    inten = np.where(np.abs(uv).max(axis=1) < side / 6, 220.0, 120.0)
    return xyz, inten


def bench(n_points: int, repeat: int) -> dict:
    from maptag import _kernels
    from maptag.cloud import IntensityCloud, SpatialIndex
    from maptag.cluster import euclidean_cluster
    from maptag.gradient import DownsampleParams, downsample_by_gradient

    xyz, inten = build_workload(n_points)
    cloud = IntensityCloud(xyz, inten)

    def timed(fn, *args, **kwargs):
        best = float("inf")
        out = None
        for _ in range(repeat):
            t0 = time.perf_counter()
            out = fn(*args, **kwargs)
            best = min(best, time.perf_counter() - t0)
        return best, out

    results = {"mode": "numba" if _kernels.NUMBA_ENABLED else "numpy",
               "points": n_points}

    t, _ = timed(_kernels.build_grid, xyz)
    results["build_grid"] = t
    index = SpatialIndex(cloud)

    # warm the JIT outside the timed region
    index.knn_batch(xyz[:64], 21)
    t, _ = timed(index.knn_batch, xyz, 21)
    results["knn_batch_k21"] = t

    params = DownsampleParams(n_neighbors=20, quantile=0.9)
    t, (down, kept, diag) = timed(downsample_by_gradient, cloud, params, index)
    results["gradient_downsample"] = t
    results["downsampled_to"] = len(down)

    tol = 4.0 * np.sqrt(1.0 / 1e5)
    t, clusters = timed(euclidean_cluster, down, tol, 1)
    results["euclidean_cluster"] = t
    results["clusters"] = len(clusters)

    u = np.clip((xyz[:, 1] * 200).astype(np.int64) + 256, 0, 511)
    v = np.clip((xyz[:, 2] * 200).astype(np.int64) + 256, 0, 511)
    rngs = np.linalg.norm(xyz, axis=1)
    _kernels.rasterize(u[:64], v[:64], rngs[:64], inten[:64], 512, 512)
    t, _ = timed(_kernels.rasterize, u, v, rngs, inten, 512, 512)
    results["rasterize"] = t
    return results


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=200000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", action="store_true",
                    help="print one json object (used by the subprocess)")
    args = ap.parse_args()

    if args.json:
        print(json.dumps(bench(args.points, args.repeat)))
        return 0

    here = bench(args.points, args.repeat)

    env = dict(os.environ, MAPTAG_DISABLE_NUMBA="1")
    proc = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--json",
         "--points", str(args.points), "--repeat", str(args.repeat)],
        env=env, capture_output=True, text=True, check=True)
    other = json.loads(proc.stdout.strip().splitlines()[-1])

    fast, slow = (here, other) if here["mode"] == "numba" else (other, here)
    keys = ["build_grid", "knn_batch_k21", "gradient_downsample",
            "euclidean_cluster", "rasterize"]
    print(f"\n{args.points} points, best of {args.repeat}")
    print(f"{'kernel':<22}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
    for k in keys:
        ratio = slow[k] / fast[k] if fast[k] > 0 else float("inf")
        print(f"{k:<22}{fast[k]:>12.4f}{slow[k]:>12.4f}{ratio:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
