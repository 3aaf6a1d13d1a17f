"""Intensity point clouds: container, PCD v0.7 file I/O, spatial index."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import (
    EmptyCloudError,
    MalformedHeaderError,
    MissingFieldError,
    TruncatedDataError,
)


@dataclass(frozen=True)
class Point3I:
    """A single map point: position plus nonnegative LiDAR intensity."""

    x: float
    y: float
    z: float
    intensity: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.intensity)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("point has non-finite coordinates or intensity")
        if self.intensity < 0:
            raise ValueError("intensity must be nonnegative")


class IntensityCloud:
    """Fixed-order point collection; indices are stable identifiers.

    Stores coordinates as an (N, 3) float64 array and intensities as (N,).
    """

    def __init__(self, xyz: np.ndarray, intensity: np.ndarray):
        xyz = np.ascontiguousarray(xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.ascontiguousarray(intensity, dtype=np.float64).reshape(-1)
        if xyz.shape[0] != intensity.shape[0]:
            raise ValueError("coordinate and intensity counts differ")
        if xyz.size and not np.isfinite(xyz).all():
            raise ValueError("cloud contains non-finite coordinates")
        if intensity.size and not np.isfinite(intensity).all():
            raise ValueError("cloud contains non-finite intensities")
        if intensity.size and intensity.min() < 0:
            raise ValueError("cloud contains negative intensities")
        self.xyz = xyz
        self.intensity = intensity

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def point(self, i: int) -> Point3I:
        x, y, z = self.xyz[i]
        return Point3I(float(x), float(y), float(z), float(self.intensity[i]))

    def subset(self, indices: np.ndarray) -> "IntensityCloud":
        indices = np.asarray(indices, dtype=np.int64)
        return IntensityCloud(self.xyz[indices], self.intensity[indices])

    def __eq__(self, other) -> bool:
        if not isinstance(other, IntensityCloud):
            return NotImplemented
        return (self.xyz.shape == other.xyz.shape
                and np.array_equal(self.xyz, other.xyz)
                and np.array_equal(self.intensity, other.intensity))


# ---------------------------------------------------------------------------
# PCD v0.7


_HEADER_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH",
                "HEIGHT", "VIEWPOINT", "POINTS", "DATA")

_DTYPES = {("F", 4): "<f4", ("F", 8): "<f8",
           ("U", 1): "<u1", ("U", 2): "<u2", ("U", 4): "<u4", ("U", 8): "<u8",
           ("I", 1): "<i1", ("I", 2): "<i2", ("I", 4): "<i4", ("I", 8): "<i8"}

_INTENSITY_NAMES = ("intensity", "intensities")


def _parse_header(stream: io.BufferedReader, path: str) -> dict:
    header: dict = {}
    line_no = 0
    while True:
        raw = stream.readline()
        line_no += 1
        if not raw:
            raise MalformedHeaderError(f"{path}: header ended before DATA line")
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError as e:
            raise MalformedHeaderError(f"{path}:{line_no}: non-ASCII header byte") from e
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        key = parts[0].upper()
        if key not in _HEADER_KEYS:
            raise MalformedHeaderError(f"{path}:{line_no}: unknown header entry {parts[0]!r}")
        header[key] = parts[1:]
        if key == "DATA":
            break
    for req in ("FIELDS", "SIZE", "TYPE", "COUNT", "POINTS", "DATA"):
        if req not in header:
            if req in ("FIELDS",):
                raise MissingFieldError(f"{path}: header has no FIELDS line")
            raise MalformedHeaderError(f"{path}: header has no {req} line")
    fields = [f.lower() for f in header["FIELDS"]]
    try:
        sizes = [int(s) for s in header["SIZE"]]
        counts = [int(c) for c in header["COUNT"]] if header["COUNT"] else [1] * len(fields)
        points = int(header["POINTS"][0])
    except (ValueError, IndexError) as e:
        raise MalformedHeaderError(f"{path}: non-integer SIZE/COUNT/POINTS") from e
    types = [t.upper() for t in header["TYPE"]]
    if not (len(fields) == len(sizes) == len(types) == len(counts)):
        raise MalformedHeaderError(f"{path}: FIELDS/SIZE/TYPE/COUNT lengths disagree")
    if points < 0:
        raise MalformedHeaderError(f"{path}: negative POINTS")
    data_kind = header["DATA"][0].lower() if header["DATA"] else ""
    if data_kind not in ("ascii", "binary"):
        raise MalformedHeaderError(f"{path}: unsupported DATA kind {data_kind!r}")
    return {"fields": fields, "sizes": sizes, "types": types, "counts": counts,
            "points": points, "data": data_kind}


def _locate_fields(meta: dict, path: str) -> dict:
    """Column metadata for x, y, z, intensity; raises if any is missing."""
    fields = meta["fields"]
    out = {}
    for want in ("x", "y", "z"):
        if want not in fields:
            raise MissingFieldError(f"{path}: required field {want!r} not in FIELDS")
        out[want] = fields.index(want)
    for name in _INTENSITY_NAMES:
        if name in fields:
            out["intensity"] = fields.index(name)
            break
    else:
        raise MissingFieldError(f"{path}: no intensity field in FIELDS")
    for key, col in out.items():
        if meta["counts"][col] != 1:
            raise MalformedHeaderError(f"{path}: field {key!r} has COUNT != 1")
        if (meta["types"][col], meta["sizes"][col]) not in _DTYPES:
            raise MalformedHeaderError(
                f"{path}: field {key!r} has unsupported TYPE/SIZE "
                f"{meta['types'][col]}{meta['sizes'][col]}")
    return out


def load_pcd(path: str) -> IntensityCloud:
    """Load a PCD v0.7 file (ascii or binary) into an IntensityCloud.

    Extra fields are ignored; missing x/y/z/intensity, malformed headers,
    short data sections and non-finite values all raise loudly.
    """
    with open(path, "rb") as fh:
        meta = _parse_header(fh, path)
        cols = _locate_fields(meta, path)
        n = meta["points"]
        if meta["data"] == "ascii":
            text = fh.read().decode("ascii", errors="strict")
            rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
            if len(rows) < n:
                raise TruncatedDataError(
                    f"{path}: expected {n} ascii rows, found {len(rows)}")
            ncols = sum(meta["counts"])
            # map field -> flattened column position
            flat = np.cumsum([0] + meta["counts"])
            data = np.empty((n, 4), dtype=np.float64)
            for i in range(n):
                parts = rows[i].split()
                if len(parts) != ncols:
                    raise TruncatedDataError(
                        f"{path}: row {i} has {len(parts)} values, expected {ncols}")
                try:
                    for j, key in enumerate(("x", "y", "z", "intensity")):
                        data[i, j] = float(parts[flat[cols[key]]])
                except ValueError as e:
                    raise TruncatedDataError(f"{path}: row {i} has a non-numeric value") from e
        else:
            dtype_fields = []
            for idx, (f, s, t, c) in enumerate(zip(meta["fields"], meta["sizes"],
                                                   meta["types"], meta["counts"])):
                key = (t, s)
                if key in _DTYPES:
                    base = _DTYPES[key]
                else:
                    base = f"V{s}"  # opaque bytes for unsupported extra fields
                shape = (c,) if c > 1 else ()
                dtype_fields.append((f"f{idx}", base, shape))
            dt = np.dtype(dtype_fields)
            buf = fh.read()
            if len(buf) < n * dt.itemsize:
                raise TruncatedDataError(
                    f"{path}: binary data holds {len(buf)} bytes, "
                    f"expected {n * dt.itemsize}")
            rec = np.frombuffer(buf[:n * dt.itemsize], dtype=dt)
            data = np.empty((n, 4), dtype=np.float64)
            for j, key in enumerate(("x", "y", "z", "intensity")):
                data[:, j] = rec[f"f{cols[key]}"].astype(np.float64)
    if n and not np.isfinite(data).all():
        bad = int(np.nonzero(~np.isfinite(data).all(axis=1))[0][0])
        raise ValueError(f"{path}: non-finite value at point {bad}")
    if n and data[:, 3].min() < 0:
        bad = int(np.argmin(data[:, 3]))
        raise ValueError(f"{path}: negative intensity at point {bad}")
    return IntensityCloud(data[:, :3], data[:, 3])


def save_pcd(cloud: IntensityCloud, path: str, binary: bool = True) -> None:
    """Write x/y/z/intensity as PCD v0.7.

    Binary files store little-endian float32; ascii uses 10 significant
    digits so values survive a round trip at float32 precision and beyond.
    """
    n = len(cloud)
    header = "\n".join([
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS x y z intensity",
        "SIZE 4 4 4 4",
        "TYPE F F F F",
        "COUNT 1 1 1 1",
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        f"DATA {'binary' if binary else 'ascii'}",
    ]) + "\n"
    data = np.empty((n, 4), dtype=np.float32)
    data[:, :3] = cloud.xyz
    data[:, 3] = cloud.intensity
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        else:
            lines = []
            for i in range(n):
                lines.append(" ".join("%.10g" % v for v in
                                      (cloud.xyz[i, 0], cloud.xyz[i, 1],
                                       cloud.xyz[i, 2], cloud.intensity[i])))
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


# ---------------------------------------------------------------------------
# spatial index


@dataclass
class KnnResult:
    indices: np.ndarray
    distances: np.ndarray


class SpatialIndex:
    """Voxel-grid nearest-neighbor index over a cloud.

    Query results match a brute-force distance sort exactly, with ties
    broken by ascending point index.
    """

    def __init__(self, cloud: IntensityCloud, cell_size: float | None = None):
        if len(cloud) == 0:
            raise EmptyCloudError("cannot index an empty cloud")
        self.cloud = cloud
        self.grid = _kernels.build_grid(cloud.xyz, cell_size)

    def knn(self, query, k: int) -> KnnResult:
        """k nearest neighbors of one query point (k > N clamps to N)."""
        if k <= 0:
            raise ValueError("k must be positive")
        q = np.asarray(query, dtype=np.float64).reshape(1, 3)
        idx, d2, found = _kernels.knn_batch(self.grid, q, k)
        nf = int(found[0])
        return KnnResult(idx[0, :nf].copy(), np.sqrt(d2[0, :nf]))

    def knn_batch(self, queries: np.ndarray, k: int):
        """Vectorized knn; returns (indices (M,k'), squared distances, found)."""
        return _kernels.knn_batch(self.grid, queries, k)

    def mean_nn_spacing(self, sample: int | None = None) -> float:
        """Mean distance to the nearest distinct neighbor.

        ``sample`` caps the number of query points (prefix of the cloud) to
        keep the estimate cheap on large maps; estimates stay deterministic.
        """
        xyz = self.cloud.xyz
        if len(self.cloud) < 2:
            raise EmptyCloudError("spacing needs at least two points")
        if sample is not None and sample < xyz.shape[0]:
            step = max(1, xyz.shape[0] // sample)
            queries = xyz[::step][:sample]
        else:
            queries = xyz
        idx, d2, found = _kernels.knn_batch(self.grid, queries, 2)
        valid = found >= 2
        return float(np.sqrt(d2[valid, 1]).mean())


def knn(cloud: IntensityCloud, query, k: int,
        index: SpatialIndex | None = None) -> KnnResult:
    """Convenience wrapper: nearest neighbors of ``query`` in ``cloud``."""
    if len(cloud) == 0:
        raise EmptyCloudError("knn on an empty cloud")
    if index is None:
        index = SpatialIndex(cloud)
    return index.knn(query, k)
