"""2D square-marker detection and ID decoding on intensity images.

The marker sheet is a white margin ring around a black frame ring around an
n x n payload grid.  Detection binarizes the raster, traces black-region
boundaries into candidate quads, samples the payload through a homography
and matches it against a dictionary under all four rotations with and
without mirroring.  A mirrored match means the candidate was imaged from
behind its surface normal; callers fix the corner order downstream.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import (AmbiguousMatchError, FrameCheckFailedError,
                     InvalidSpecError, TooFewPixelsError)
from .reproject import IntensityImage

BINARIZE_WINDOW = 31
MIN_QUAD_AREA = 64.0
SIDE_RATIO_LIMIT = 1.5
FRAME_PASS_FRACTION = 0.8


# dictionary


def _check_code(code: np.ndarray) -> np.ndarray:
    arr = np.asarray(code, dtype=bool)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidSpecError("codeword must be a square bit grid")
    if arr.shape[0] < 4:
        raise InvalidSpecError("bit grid must be at least 4x4")
    return arr


def transform_bits(code: np.ndarray, rotation: int, mirrored: bool) -> np.ndarray:
    """Rotate a bit grid by quarter turns (counter-clockwise), mirroring first.

    The mirror is a transpose: the diagonal reflection whose corner relabel
    is exactly the swap of opposite off-diagonal corners.
    """
    base = code.T if mirrored else code
    return np.rot90(base, rotation % 4)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(a != b))


class TagDictionary:
    """Ordered codeword list with a guaranteed pairwise distance.

    Every pair of stored codewords, including each codeword against its own
    rotations and mirror images, differs in at least ``min_distance`` bits
    under every rotation/mirror combination.
    """

    def __init__(self, codes, min_distance: int, verify: bool = True):
        self.codes = [_check_code(c) for c in codes]
        if not self.codes:
            raise InvalidSpecError("dictionary has no codewords")
        self.n = self.codes[0].shape[0]
        if any(c.shape[0] != self.n for c in self.codes):
            raise InvalidSpecError("codewords disagree on grid size")
        self.min_distance = int(min_distance)
        if self.min_distance < 4:
            raise InvalidSpecError("minimum distance must be at least 4")
        # all 8 orientation variants of every codeword, flattened for matching
        self._variants = np.stack([
            np.stack([transform_bits(c, r, m).ravel()
                      for m in (False, True) for r in range(4)])
            for c in self.codes
        ])
        if verify:
            self.verify()

    def __len__(self) -> int:
        return len(self.codes)

    def verify(self) -> None:
        """Exhaustive distance check; raises InvalidSpecError on violation."""
        flat = np.stack([c.ravel() for c in self.codes])
        for i, c in enumerate(flat):
            for j in range(len(self.codes)):
                diffs = (self._variants[j] != c[None, :]).sum(axis=1)
                if i == j:
                    diffs = diffs[1:]  # skip the identity variant
                if int(diffs.min()) < self.min_distance:
                    raise InvalidSpecError(
                        f"codewords {i} and {j} come within "
                        f"{int(diffs.min())} bits under rotation/mirror")

    def save(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as f:
            f.write(f"# square-marker dictionary, distance >= "
                    f"{self.min_distance} over rotations and mirrors\n")
            f.write(f"GRID {self.n}\n")
            for c in self.codes:
                f.write("".join("1" if b else "0" for b in c.ravel()) + "\n")

    @classmethod
    def load(cls, path_or_lines, min_distance: int = 4,
             verify: bool = True) -> "TagDictionary":
        if isinstance(path_or_lines, str):
            with open(path_or_lines, "r", encoding="ascii") as f:
                lines = f.readlines()
        else:
            lines = list(path_or_lines)
        lines = [ln.strip() for ln in lines]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if not lines or not lines[0].startswith("GRID"):
            raise InvalidSpecError("dictionary file must start with 'GRID n'")
        try:
            n = int(lines[0].split()[1])
        except (IndexError, ValueError) as e:
            raise InvalidSpecError("malformed GRID line") from e
        codes = []
        for ln in lines[1:]:
            if len(ln) != n * n or set(ln) - {"0", "1"}:
                raise InvalidSpecError(f"bad codeword line {ln!r}")
            codes.append(np.array([ch == "1" for ch in ln],
                                  dtype=bool).reshape(n, n))
        return cls(codes, min_distance, verify=verify)


def generate_dictionary(n: int = 4, count: int = 50, min_distance: int = 4,
                        seed: int = 1, max_attempts: int = 500000) -> TagDictionary:
    """Greedy random dictionary search with a fixed seed.

    Candidates are accepted when they keep ``min_distance`` bits from every
    accepted codeword and from their own nontrivial rotations and mirrors.
    """
    if n < 4:
        raise InvalidSpecError("bit grid must be at least 4x4")
    rng = np.random.default_rng(seed)
    accepted: list[np.ndarray] = []
    variants: list[np.ndarray] = []
    attempts = 0
    while len(accepted) < count:
        attempts += 1
        if attempts > max_attempts:
            raise InvalidSpecError(
                f"dictionary search exhausted after {max_attempts} attempts "
                f"({len(accepted)}/{count} found)")
        cand = rng.integers(0, 2, size=(n, n)).astype(bool)
        var = np.stack([transform_bits(cand, r, m).ravel()
                        for m in (False, True) for r in range(4)])
        flat = cand.ravel()
        self_d = (var[1:] != flat[None, :]).sum(axis=1).min()
        if int(self_d) < min_distance:
            continue
        ok = True
        for v in variants:
            if int((v != flat[None, :]).sum(axis=1).min()) < min_distance:
                ok = False
                break
        if ok:
            accepted.append(cand)
            variants.append(var)
    return TagDictionary(accepted, min_distance, verify=False)


_builtin_cache: TagDictionary | None = None


def builtin_dictionary() -> TagDictionary:
    """The packaged 50-codeword 4x4 dictionary (verified on first load)."""
    global _builtin_cache
    if _builtin_cache is None:
        ref = importlib.resources.files("maptag").joinpath(
            "data/builtin_dict.txt")
        _builtin_cache = TagDictionary.load(
            ref.read_text(encoding="ascii").splitlines())
    return _builtin_cache


# binarization


def binarize(image: IntensityImage | np.ndarray,
             window: int = BINARIZE_WINDOW) -> np.ndarray:
    """Adaptive threshold against the local mean of non-empty pixels.

    A pixel is white iff it is non-empty and strictly brighter than the mean
    over a window x window box (clamped at borders) of non-empty values.
    Empty pixels come out black.
    """
    vals = image.values if isinstance(image, IntensityImage) else np.asarray(image)
    vals = vals.astype(np.float64)
    filled = ~np.isnan(vals)
    if int(filled.sum()) < 64:
        raise TooFewPixelsError(
            f"only {int(filled.sum())} non-empty pixels, need 64")
    h, w = vals.shape
    r = max(1, int(window) // 2)
    acc = np.where(filled, vals, 0.0)
    # inclusive prefix sums padded with a zero row/col for clean windowing
    sat = np.zeros((h + 1, w + 1))
    sat[1:, 1:] = acc.cumsum(0).cumsum(1)
    cnt = np.zeros((h + 1, w + 1))
    cnt[1:, 1:] = filled.astype(np.float64).cumsum(0).cumsum(1)
    rows = np.arange(h)
    cols = np.arange(w)
    r0 = np.clip(rows - r, 0, h)[:, None]
    r1 = np.clip(rows + r + 1, 0, h)[:, None]
    c0 = np.clip(cols - r, 0, w)[None, :]
    c1 = np.clip(cols + r + 1, 0, w)[None, :]

    def boxsum(table):
        return (table[r1, c1] - table[r0, c1] - table[r1, c0] + table[r0, c0])

    total = boxsum(sat)
    num = boxsum(cnt)
    mean = np.divide(total, num, out=np.zeros_like(total), where=num > 0)
    return filled & (vals > mean)


# quad detection


@dataclass
class QuadDetection:
    """Four sub-pixel corners of a dark square region.

    Corners run counter-clockwise as the image is viewed (row 0 on top),
    starting from the corner nearest the image's top-left.
    """

    corners: np.ndarray  # (4, 2) float64, (u, v) = (col, row)

    def area(self) -> float:
        c = self.corners
        s = 0.0
        for i in range(4):
            j = (i + 1) % 4
            s += c[i, 0] * c[j, 1] - c[j, 0] * c[i, 1]
        return abs(s) / 2.0


def _order_corners(pts: np.ndarray) -> np.ndarray:
    """Normalize to visual counter-clockwise order, top-left corner first."""
    pts = pts.astype(np.float64)
    shoelace = 0.0
    for i in range(4):
        j = (i + 1) % 4
        shoelace += pts[i, 0] * pts[j, 1] - pts[j, 0] * pts[i, 1]
    # with v pointing down, visually counter-clockwise means negative area
    if shoelace > 0:
        pts = pts[::-1]
    start = int(np.lexsort((pts[:, 0], pts[:, 1], pts.sum(axis=1)))[0])
    return np.roll(pts, -start, axis=0)


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    fu = u - u0
    fv = v - v0
    return (img[v0, u0] * (1 - fu) * (1 - fv)
            + img[v0, u0 + 1] * fu * (1 - fv)
            + img[v0 + 1, u0] * (1 - fu) * fv
            + img[v0 + 1, u0 + 1] * fu * fv)


def _edge_points(img: np.ndarray, p0: np.ndarray, p1: np.ndarray,
                 half_width: float = 2.0, step: float = 0.25) -> np.ndarray:
    """Sub-pixel edge samples along the segment p0->p1.

    Walks short profiles perpendicular to the segment and takes the
    gradient-magnitude-weighted mean position on each.
    """
    d = p1 - p0
    length = float(np.hypot(*d))
    if length < 4.0:
        return np.empty((0, 2))
    d = d / length
    normal = np.array([-d[1], d[0]])
    n_samples = max(8, int(length / 2))
    ts = np.linspace(0.15, 0.85, n_samples)
    offs = np.arange(-half_width, half_width + 1e-9, step)
    base = p0[None, :] + ts[:, None] * (length * d)[None, :]
    pos = base[:, None, :] + offs[None, :, None] * normal[None, None, :]
    vals = _bilinear(img, pos[..., 0], pos[..., 1])
    grad = np.abs(np.diff(vals, axis=1))
    mids = (offs[:-1] + offs[1:]) / 2.0
    wsum = grad.sum(axis=1)
    good = wsum > 1e-9
    if not good.any():
        return np.empty((0, 2))
    off_hat = (grad[good] * mids[None, :]).sum(axis=1) / wsum[good]
    return base[good] + off_hat[:, None] * normal[None, :]


def _tls_line(points: np.ndarray):
    """Total-least-squares line through points: (anchor, unit direction)."""
    c = points.mean(axis=0)
    q = points - c
    cov = q.T @ q
    _, vecs = np.linalg.eigh(cov)
    return c, vecs[:, -1]


def _intersect(l1, l2) -> np.ndarray | None:
    (c1, d1), (c2, d2) = l1, l2
    mat = np.column_stack([d1, -d2])
    det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
    if abs(det) < 1e-9:
        return None
    t = np.linalg.solve(mat, c2 - c1)[0]
    return c1 + t * d1


def _refine_corners(img: np.ndarray, corners: np.ndarray,
                    max_shift: float = 2.5) -> np.ndarray:
    lines = []
    for i in range(4):
        pts = _edge_points(img, corners[i], corners[(i + 1) % 4])
        lines.append(_tls_line(pts) if pts.shape[0] >= 4 else None)
    out = corners.copy()
    for i in range(4):
        la = lines[(i + 3) % 4]
        lb = lines[i]
        if la is None or lb is None:
            continue
        p = _intersect(la, lb)
        if p is not None and np.hypot(*(p - corners[i])) <= max_shift:
            out[i] = p
    return out


def detect_quads(binary: np.ndarray, min_area: float = MIN_QUAD_AREA,
                 refine: bool = True) -> list[QuadDetection]:
    """Find dark square regions in a binary image.

    Contours of black regions are approximated to 4 corners (3% of perimeter
    tolerance); convex quads with enough area and roughly equal sides
    survive.  Near-duplicate quads (boundaries traced from both sides of the
    same edge) collapse to one.
    """
    mask = np.logical_not(binary).astype(np.uint8) * 255
    contours, _ = cv2.findContours(mask, cv2.RETR_LIST,
                                   cv2.CHAIN_APPROX_SIMPLE)
    cands = []
    for cont in contours:
        peri = cv2.arcLength(cont, True)
        approx = cv2.approxPolyDP(cont, 0.03 * peri, True)
        if approx.shape[0] != 4 or not cv2.isContourConvex(approx):
            continue
        if cv2.contourArea(approx) < min_area:
            continue
        pts = approx.reshape(4, 2).astype(np.float64)
        sides = np.hypot(*(np.roll(pts, -1, axis=0) - pts).T)
        if sides.min() <= 0 or sides.max() / sides.min() > SIDE_RATIO_LIMIT:
            continue
        cands.append(_order_corners(pts))
    # deterministic order: big quads first, then by position
    cands.sort(key=lambda c: (-cv2.contourArea(c.astype(np.float32)),
                              c[0, 1], c[0, 0]))
    kept: list[np.ndarray] = []
    for c in cands:
        if any(np.hypot(*(c - k).T).mean() < 3.0 for k in kept):
            continue
        kept.append(c)
    img_f = binary.astype(np.float64)
    out = []
    for c in kept:
        corners = _refine_corners(img_f, c) if refine else c
        out.append(QuadDetection(corners=_order_corners(corners)))
    return out


# bit sampling


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform from 4 point correspondences."""
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    a = np.asarray(rows)
    _, _, vt = np.linalg.svd(a)
    h = vt[-1].reshape(3, 3)
    if abs(h[2, 2]) < 1e-12:
        raise FrameCheckFailedError("degenerate quad for homography")
    return h / h[2, 2]


def _apply_h(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    return p[:, :2] / p[:, 2:3]


def _patch_means(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Mean over the 3x3 integer-pixel patch around each position."""
    h, w = img.shape
    u = np.clip(np.round(uv[:, 0]).astype(int), 0, w - 1)
    v = np.clip(np.round(uv[:, 1]).astype(int), 0, h - 1)
    acc = np.zeros(len(uv))
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            acc += img[np.clip(v + dv, 0, h - 1), np.clip(u + du, 0, w - 1)]
    return acc / 9.0


def _ring_centers(lo: int, hi: int) -> np.ndarray:
    """Module-center grid coords (x, y) of the square ring lo <= i, j < hi."""
    cells = []
    for i in range(lo, hi):
        for j in range(lo, hi):
            if i in (lo, hi - 1) or j in (lo, hi - 1):
                cells.append((j + 0.5, i + 0.5))
    return np.asarray(cells)


def sample_bits(image: IntensityImage | np.ndarray, quad: QuadDetection,
                n: int, border_modules: int = 1) -> np.ndarray:
    """Read the n x n payload inside a quad bounding the black frame.

    The quad spans n + 2*border_modules modules.  Module centers are sampled
    through a homography on the intensity raster (empty pixels read as 0)
    and thresholded at the mean over the two border rings, the black frame
    inside the quad and the white margin just outside; that midpoint adapts
    to any intensity scale.  The frame must read at least 80% below the
    threshold and the margin 80% above it.
    """
    vals = image.values if isinstance(image, IntensityImage) else np.asarray(image)
    img = np.nan_to_num(vals.astype(np.float64), nan=0.0)
    s = n + 2 * border_modules
    src = np.array([[0.0, 0.0], [0.0, s], [s, s], [s, 0.0]])
    h = _homography(src, quad.corners)

    frame_vals = _patch_means(img, _apply_h(h, _ring_centers(0, s)))
    margin_vals = _patch_means(img, _apply_h(h, _ring_centers(-1, s + 1)))
    threshold = float(np.concatenate([frame_vals, margin_vals]).mean())
    frame_black = float((frame_vals < threshold).mean())
    margin_white = float((margin_vals >= threshold).mean())
    if frame_black < FRAME_PASS_FRACTION:
        raise FrameCheckFailedError(
            f"black frame only {frame_black:.0%} black")
    if margin_white < FRAME_PASS_FRACTION:
        raise FrameCheckFailedError(
            f"white margin only {margin_white:.0%} white")

    b = border_modules
    gy, gx = np.mgrid[0:n, 0:n]
    centers = np.column_stack([gx.ravel() + b + 0.5, gy.ravel() + b + 0.5])
    payload = _patch_means(img, _apply_h(h, centers))
    return (payload > threshold).reshape(n, n)


# dictionary matching


@dataclass
class DictMatch:
    tag_id: int
    rotation: int      # quarter turns counter-clockwise applied to codeword
    mirrored: bool
    distance: int


def match_dictionary(bits: np.ndarray, dictionary: TagDictionary,
                     max_correction: int = 1) -> DictMatch | None:
    """Find the unique codeword within ``max_correction`` bits of ``bits``.

    All rotations and mirror states are searched.  With max_correction
    bounded by (min_distance - 1) / 2 at most one candidate can match; two
    hits mean the dictionary's distance promise is broken.
    """
    bits = np.asarray(bits, dtype=bool)
    if bits.shape != (dictionary.n, dictionary.n):
        raise InvalidSpecError(
            f"bit grid {bits.shape} does not match dictionary "
            f"size {dictionary.n}")
    if max_correction > (dictionary.min_distance - 1) // 2:
        raise ValueError("max_correction exceeds the unique-decoding bound")
    flat = bits.ravel()
    hits = []
    for idx in range(len(dictionary)):
        diffs = (dictionary._variants[idx] != flat[None, :]).sum(axis=1)
        best = int(diffs.argmin())
        if int(diffs[best]) <= max_correction:
            mirrored = best >= 4
            hits.append(DictMatch(tag_id=idx, rotation=best % 4,
                                  mirrored=mirrored,
                                  distance=int(diffs[best])))
    if not hits:
        return None
    if len(hits) > 1:
        raise AmbiguousMatchError(
            f"codewords {[h.tag_id for h in hits]} all within "
            f"{max_correction} bits")
    return hits[0]


# decode orchestration


@dataclass
class ImageDetection:
    """A decoded marker in image space.

    ``corners_px`` are the sheet's outer corners (one module beyond the
    black frame, through the fitted homography), starting at the decoded
    tag's top-left corner and running counter-clockwise in the image.  When
    ``mirrored`` is set the image shows the tag back-to-front and indices 1
    and 3 must be swapped after the corners are lifted to 3D (the swap is
    owned by the pose stage).  ``quad_px`` keeps the detected black-frame
    boundary for diagnostics.
    """

    tag_id: int
    rotation: int
    mirrored: bool
    corners_px: np.ndarray
    quad_px: np.ndarray
    bits: np.ndarray
    distance: int


@dataclass
class DecodeDiagnostics:
    quads_found: int = 0
    frame_failures: int = 0
    unmatched: int = 0
    ambiguous: int = 0
    notes: list = field(default_factory=list)


def decode_image(image: IntensityImage | np.ndarray,
                 dictionary: TagDictionary,
                 max_correction: int = 1,
                 border_modules: int = 1):
    """Full image-side decode: binarize, find quads, sample, match.

    Returns (detections, diagnostics).  Candidate quads that fail the frame
    checks or match nothing are dropped quietly into the diagnostics.
    """
    diag = DecodeDiagnostics()
    try:
        binary = binarize(image)
    except TooFewPixelsError as e:
        diag.notes.append(str(e))
        return [], diag
    quads = detect_quads(binary)
    diag.quads_found = len(quads)
    detections = []
    for quad in quads:
        try:
            bits = sample_bits(image, quad, dictionary.n, border_modules)
        except FrameCheckFailedError as e:
            diag.frame_failures += 1
            diag.notes.append(str(e))
            continue
        try:
            match = match_dictionary(bits, dictionary, max_correction)
        except AmbiguousMatchError as e:
            diag.ambiguous += 1
            diag.notes.append(str(e))
            continue
        if match is None:
            diag.unmatched += 1
            continue
        # sheet corners sit one module outside the frame quad
        s = dictionary.n + 2 * border_modules
        src = np.array([[0.0, 0.0], [0.0, s], [s, s], [s, 0.0]])
        h = _homography(src, quad.corners)
        sheet = _apply_h(h, np.array([[-1.0, -1.0], [-1.0, s + 1.0],
                                      [s + 1.0, s + 1.0], [s + 1.0, -1.0]]))
        detections.append(ImageDetection(
            tag_id=match.tag_id,
            rotation=match.rotation,
            mirrored=match.mirrored,
            corners_px=np.roll(sheet, -match.rotation, axis=0),
            quad_px=np.roll(quad.corners, -match.rotation, axis=0),
            bits=bits,
            distance=match.distance,
        ))
    return detections, diag
