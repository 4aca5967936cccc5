"""Grayscale frame handling: PGM IO, thresholding, contours, quad candidates.

Images are numpy uint8 arrays of shape (height, width). Pixel (row, col)
has its center at continuous coordinates x = col, y = row, with x growing
right and y growing down. Binarized frames mark ink with 0 and
background with 255.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import FormatError

# Moore neighborhood in clockwise screen order starting east: (dx, dy).
_MOORE = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))

_WS = b" \t\r\n\x0b\x0c"


def load_pgm(src) -> np.ndarray:
    """Read a binary (P5) PGM image with maxval <= 255.

    Args:
        src: file system path, or the raw bytes of a PGM file.

    Returns:
        uint8 array of shape (height, width).

    Raises:
        FormatError: on malformed content, naming the byte offset.
    """
    if isinstance(src, (bytes, bytearray)):
        data, path = bytes(src), "<bytes>"
    else:
        path = src
        with open(path, "rb") as fh:
            data = fh.read()

    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM, expected magic 'P5' at byte 0")
    pos = 2

    def next_token(start):
        i = start
        while True:
            while i < len(data) and data[i] in _WS:
                i += 1
            if i < len(data) and data[i : i + 1] == b"#":
                while i < len(data) and data[i] not in b"\n":
                    i += 1
            else:
                break
        if i >= len(data):
            raise FormatError(f"{path}: header truncated at byte {i}")
        j = i
        while j < len(data) and data[j] not in _WS:
            j += 1
        return data[i:j], i, j

    fields = []
    for name in ("width", "height", "maxval"):
        tok, tok_at, pos = next_token(pos)
        try:
            val = int(tok)
        except ValueError:
            raise FormatError(f"{path}: bad {name} {tok!r} at byte {tok_at}") from None
        if val <= 0:
            raise FormatError(f"{path}: {name} must be positive, got {val} at byte {tok_at}")
        fields.append((val, tok_at))
    (width, _), (height, _), (maxval, maxval_at) = fields
    if maxval > 255:
        raise FormatError(f"{path}: maxval {maxval} at byte {maxval_at} exceeds 255")

    # Exactly one whitespace byte separates the header from the raster.
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError(f"{path}: missing raster separator at byte {pos}")
    pos += 1

    need = width * height
    if len(data) - pos < need:
        raise FormatError(
            f"{path}: raster truncated at byte {len(data)}, need {need} bytes from byte {pos}"
        )
    raster = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return raster.reshape(height, width).copy()


def save_pgm(img: np.ndarray, path) -> None:
    """Write a uint8 grayscale array as binary PGM (maxval 255)."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-d grayscale array, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def otsu_threshold(img: np.ndarray) -> int:
    """Threshold maximizing between-class variance; first maximum wins."""
    hist = np.bincount(np.asarray(img, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    cum = np.cumsum(hist * np.arange(256))
    mean_total = cum[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = cum / w0
        mu1 = (mean_total - cum) / w1
    var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between[~np.isfinite(var_between)] = -1.0
    return int(np.argmax(var_between))


def binarize(img: np.ndarray, threshold: int | None = 128) -> np.ndarray:
    """Split a grayscale frame into ink and background.

    Pixels whose intensity exceeds the threshold become background (255);
    the rest are ink (0). Pass None to pick the threshold automatically
    (Otsu).

    Returns:
        uint8 array of the same shape, 0 where the pixel is black and
        255 where it is white.
    """
    arr = np.asarray(img, dtype=np.uint8)
    if threshold is None:
        threshold = otsu_threshold(arr)
    if not 0 <= int(threshold) <= 255:
        raise ValueError(f"threshold must be in [0, 255], got {threshold}")
    return np.where(arr > np.uint8(threshold), np.uint8(255), np.uint8(0))


def trace_contours(binary: np.ndarray) -> list[np.ndarray]:
    """Trace the outer boundary of every 8-connected ink region.

    Moore neighborhood tracing with Jacob's stopping criterion, started at
    each region's raster-first pixel. Interior holes are never traced.
    Contours shorter than 4 points are dropped.

    Args:
        binary: image from binarize (0 = ink), or a bool mask (True = ink).

    Returns:
        list of int32 arrays of shape (n, 2) holding (x, y) pixel centers
        in boundary order, one per region, ordered by the raster position
        of the region's first pixel.
    """
    binary = np.asarray(binary)
    mask = binary if binary.dtype == bool else binary == 0
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=np.uint8))
    if count == 0:
        return []
    padded = np.pad(labels, 1)

    # Raster-first pixel per label; ndimage.find_objects bounds the scan.
    contours = []
    starts = []
    for idx, sl in enumerate(ndimage.find_objects(labels)):
        lbl = idx + 1
        ys, xs = np.nonzero(labels[sl] == lbl)
        order = np.lexsort((xs, ys))[0]
        y0 = int(ys[order]) + sl[0].start
        x0 = int(xs[order]) + sl[1].start
        starts.append((y0, x0, lbl, len(ys)))
    starts.sort()

    for y0, x0, lbl, n_px in starts:
        contour = _moore_trace(padded, lbl, x0 + 1, y0 + 1, 8 * n_px + 16)
        if len(contour) >= 4:
            contours.append(np.asarray(contour, dtype=np.int32) - 1)
    return contours


_DIR_INDEX = {d: i for i, d in enumerate(_MOORE)}


def _moore_trace(padded, lbl, sx, sy, cap):
    """Walk one outer boundary clockwise; coordinates are in padded space.

    Stops on Jacob's criterion: the start pixel is about to be left in the
    same direction as the first move, so the walk would repeat.
    """
    start = (sx, sy)
    # The raster-first pixel has no region pixel to its west or north, so
    # the west neighbor is a known-outside backtrack.
    p, b = start, (sx - 1, sy)
    contour = [start]
    first_dir = None
    for _ in range(cap):
        d = _DIR_INDEX[(b[0] - p[0], b[1] - p[1])]
        found = -1
        for step in range(1, 9):
            k = (d + step) % 8
            if padded[p[1] + _MOORE[k][1], p[0] + _MOORE[k][0]] == lbl:
                found = k
                break
        if found < 0:
            break  # isolated pixel
        if p == start:
            if first_dir is None:
                first_dir = found
            elif found == first_dir:
                break
        q = (p[0] + _MOORE[found][0], p[1] + _MOORE[found][1])
        if step == 1:
            new_b = b
        else:
            prev = (d + step - 1) % 8
            new_b = (p[0] + _MOORE[prev][0], p[1] + _MOORE[prev][1])
        if q != start:
            contour.append(q)
        p, b = q, new_b
    return contour


def _perimeter(points: np.ndarray) -> float:
    d = np.diff(np.vstack([points, points[:1]]).astype(np.float64), axis=0)
    return float(np.hypot(d[:, 0], d[:, 1]).sum())


def _point_segment_dist(pts, a, b):
    """Distance from each point to segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.hypot(*(pts - a).T)
    t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(pts - proj).T)


def _douglas_peucker(pts: np.ndarray, eps: float) -> list[int]:
    """Indices of the polyline vertices kept at tolerance eps (open chain)."""
    n = len(pts)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        dist = _point_segment_dist(pts[i + 1 : j], pts[i], pts[j])
        k = int(np.argmax(dist))
        if dist[k] > eps:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return [int(i) for i in np.nonzero(keep)[0]]


def approx_polygon(contour: np.ndarray, epsilon: float) -> list[int]:
    """Douglas-Peucker vertex indices for a closed contour.

    The chain is split at the contour start and its farthest point, each
    half simplified at the given tolerance, and split anchors that ended
    up within tolerance of their neighbor chord are pruned afterwards so
    a start point in the middle of an edge does not survive as a vertex.
    """
    pts = np.asarray(contour, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return list(range(n))
    far = int(np.argmax(np.hypot(*(pts - pts[0]).T)))
    if far == 0:
        return [0]
    idx_a = _douglas_peucker(pts[: far + 1], epsilon)
    second = np.vstack([pts[far:], pts[:1]])
    idx_b = [(far + i) % n for i in _douglas_peucker(second, epsilon)]
    merged = []
    for i in idx_a + idx_b:
        if not merged or merged[-1] != i:
            merged.append(i)
    if len(merged) > 1 and merged[0] == merged[-1]:
        merged.pop()

    # Prune vertices that sit within eps of the chord through their
    # neighbors; the two split anchors are not corners of the shape
    # unless the geometry says so.
    changed = True
    while changed and len(merged) > 3:
        changed = False
        for i in range(len(merged)):
            a = pts[merged[(i - 1) % len(merged)]]
            b = pts[merged[(i + 1) % len(merged)]]
            p = pts[merged[i]]
            if _point_segment_dist(p[None, :], a, b)[0] <= epsilon:
                merged.pop(i)
                changed = True
                break
    return merged


def polygon_area(corners: np.ndarray) -> float:
    """Signed area; positive for clockwise winding in y-down coordinates."""
    c = np.asarray(corners, dtype=np.float64)
    x, y = c[:, 0], c[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _fit_line(points: np.ndarray):
    """Total least squares line through points: (centroid, unit normal)."""
    mean = points.mean(axis=0)
    centered = points - mean
    cov = centered.T @ centered
    w, v = np.linalg.eigh(cov)
    return mean, v[:, 0]  # smallest-eigenvalue direction is the normal


def _intersect(l1, l2, fallback):
    (m1, n1), (m2, n2) = l1, l2
    a = np.vstack([n1, n2])
    b = np.array([n1 @ m1, n2 @ m2])
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if abs(det) < 1e-12:
        return np.asarray(fallback, dtype=np.float64)
    return np.linalg.solve(a, b)


# Boundary pixel centers sit about a quarter pixel inside the true edge
# when binarization cuts at half coverage, so fitted side lines are pushed
# outward by this amount before intersecting.
BOUNDARY_OFFSET_PX = 0.25


def _refine_corners(contour: np.ndarray, verts: list[int]) -> np.ndarray:
    """Sub-pixel corners from least-squares side lines.

    Each side keeps the middle 60 percent of its boundary run so the
    rounded pixels near the corners do not bias the fit; the fitted lines
    are then offset outward by BOUNDARY_OFFSET_PX to undo the half
    coverage discretization bias.
    """
    pts = np.asarray(contour, dtype=np.float64)
    n = len(pts)
    centroid = pts.mean(axis=0)
    lines = []
    for i in range(4):
        a, b = verts[i], verts[(i + 1) % 4]
        run = np.arange(a, b + 1) % n if b > a else np.arange(a, b + n + 1) % n
        m = len(run)
        lo, hi = int(np.floor(0.2 * m)), int(np.ceil(0.8 * m))
        side = pts[run[lo:hi]] if hi - lo >= 2 else pts[run]
        mean, normal = _fit_line(side)
        if normal @ (centroid - mean) > 0:
            normal = -normal  # make the normal point away from the interior
        lines.append((mean + BOUNDARY_OFFSET_PX * normal, normal))
    corners = np.empty((4, 2), dtype=np.float64)
    for i in range(4):
        corners[i] = _intersect(lines[(i - 1) % 4], lines[i], pts[verts[i]])
    return corners


def _is_strictly_convex(corners: np.ndarray) -> bool:
    c = np.asarray(corners, dtype=np.float64)
    sign = 0.0
    for i in range(4):
        e1 = c[(i + 1) % 4] - c[i]
        e2 = c[(i + 2) % 4] - c[(i + 1) % 4]
        cross = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(cross) < 1e-9:
            return False
        if sign == 0.0:
            sign = np.sign(cross)
        elif np.sign(cross) != sign:
            return False
    return True


def _anchor_first(corners: np.ndarray) -> np.ndarray:
    """Roll corners so index 0 is the northwest-most: min x+y, then y, then x."""
    best = min(range(4), key=lambda i: (corners[i, 0] + corners[i, 1], corners[i, 1], corners[i, 0]))
    return np.roll(corners, -best, axis=0)


def detect_quads(
    contours: list[np.ndarray],
    *,
    epsilon_frac: float = 0.02,
    min_area: float = 100.0,
    min_corner_sep: float = 4.0,
) -> list[np.ndarray]:
    """Filter contours down to convex quadrilateral candidates.

    Contours are simplified at a tolerance of epsilon_frac times their
    perimeter; only simplifications with exactly four vertices survive.
    Corners are refined to sub-pixel positions by intersecting least
    squares side lines, then checked for strict convexity, signed area
    above min_area and pairwise separation of at least min_corner_sep.

    Returns:
        list of float64 (4, 2) corner arrays, clockwise, corner 0 being
        the northwest-most (smallest x+y, ties broken by y then x).
    """
    quads = []
    for contour in contours:
        if len(contour) < 4:
            continue
        eps = epsilon_frac * _perimeter(contour)
        verts = approx_polygon(contour, eps)
        if len(verts) != 4:
            continue
        corners = _refine_corners(contour, verts)
        if not _is_strictly_convex(corners):
            continue
        if polygon_area(corners) < 0:
            corners = corners[::-1]
        if polygon_area(corners) <= min_area:
            continue
        dists = [np.hypot(*(corners[i] - corners[j])) for i in range(4) for j in range(i + 1, 4)]
        if min(dists) < min_corner_sep:
            continue
        quads.append(_anchor_first(corners))
    return quads
