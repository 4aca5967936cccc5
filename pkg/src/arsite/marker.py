"""Square mark dictionary, homography estimation and identification.

A mark is an 8x8 cell grid: a one cell black frame ring around a 6x6
payload. Payload bit 1 means black ink. The canonical cell grid has row 0
at the top and column 0 at the left when the mark faces the camera
upright; quad corner 0 (northwest-most) corresponds to canonical cell
(0, 0) after the matched rotation is applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .errors import FormatError, GeometryError

GRID = 8
PAYLOAD = 6
RING_CELLS = GRID * GRID - PAYLOAD * PAYLOAD  # 28
MIN_PAIR_HAMMING = 10

# Default payloads found by seeded search: every cross-template Hamming
# distance over all relative rotations is >= 13 and every template keeps
# distance >= 14 to its own rotations, comfortably above the required 10.
_DEFAULT_PAYLOADS = {
    1: ("Burnt Palace", ("000110", "100011", "110000", "001101", "100000", "011101")),
    2: ("Pyramid B", ("110110", "000010", "001011", "110100", "000111", "110101")),
    3: ("Pyramid C", ("001000", "011001", "000111", "100010", "111100", "100100")),
    4: ("Shrine", ("100010", "100110", "100001", "111100", "110100", "000010")),
}

DEFAULT_SIDE_M = 0.2


def _rot_cw(grid: np.ndarray, k: int) -> np.ndarray:
    """Rotate a cell grid k quarter turns clockwise."""
    return np.rot90(grid, -k)


@dataclass
class MarkerTemplate:
    id: int
    name: str
    side_m: float
    payload: np.ndarray  # (6, 6) uint8, 1 = black

    def grid8(self) -> np.ndarray:
        """Full 8x8 grid with the black frame ring in place."""
        g = np.ones((GRID, GRID), dtype=np.uint8)
        g[1:-1, 1:-1] = self.payload
        return g

    def payload_rows(self) -> list[str]:
        return ["".join(str(int(b)) for b in row) for row in self.payload]


@dataclass
class MarkerDictionary:
    templates: list[MarkerTemplate] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {t.id: t for t in self.templates}

    def get(self, marker_id: int) -> MarkerTemplate | None:
        return self._by_id.get(marker_id)

    def validate(self) -> None:
        """Check structural and separability invariants.

        Raises:
            FormatError: duplicate ids, malformed payloads, rotationally
                symmetric templates, or any cross-template Hamming
                distance under MIN_PAIR_HAMMING at some relative rotation.
        """
        seen = set()
        for t in self.templates:
            if not isinstance(t.id, int) or t.id < 0:
                raise FormatError(f"marker id must be a non-negative integer, got {t.id!r}")
            if t.id in seen:
                raise FormatError(f"duplicate marker id {t.id}")
            seen.add(t.id)
            if not t.name:
                raise FormatError(f"marker {t.id}: empty name")
            if not t.side_m > 0:
                raise FormatError(f"marker {t.id}: side_m must be positive, got {t.side_m}")
            p = np.asarray(t.payload)
            if p.shape != (PAYLOAD, PAYLOAD) or not np.isin(p, (0, 1)).all():
                raise FormatError(f"marker {t.id}: payload must be 6x6 of 0/1 bits")
            rots = [_rot_cw(p, k) for k in range(4)]
            for a in range(4):
                for b in range(a + 1, 4):
                    if np.array_equal(rots[a], rots[b]):
                        raise FormatError(f"marker {t.id}: payload is rotationally symmetric")
        for i, a in enumerate(self.templates):
            for b in self.templates[i + 1 :]:
                for k in range(4):
                    d = int(np.sum(a.payload != _rot_cw(b.payload, k)))
                    if d < MIN_PAIR_HAMMING:
                        raise FormatError(
                            f"markers {a.id} and {b.id} differ by only {d} bits at"
                            f" rotation {k}, need {MIN_PAIR_HAMMING}"
                        )


def default_dictionary() -> MarkerDictionary:
    """The built-in four mark dictionary used by the CLI."""
    templates = [
        MarkerTemplate(
            id=mid,
            name=name,
            side_m=DEFAULT_SIDE_M,
            payload=np.array([[int(c) for c in row] for row in rows], dtype=np.uint8),
        )
        for mid, (name, rows) in sorted(_DEFAULT_PAYLOADS.items())
    ]
    d = MarkerDictionary(templates)
    d.validate()
    return d


def load_markers(path) -> MarkerDictionary:
    """Load and validate a marker dictionary from JSON."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(raw, list):
        raise FormatError(f"{path}: expected a JSON array of marker records")
    templates = []
    for i, rec in enumerate(raw):
        try:
            payload = np.array(
                [[int(c) for c in row] for row in rec["payload"]], dtype=np.uint8
            )
            templates.append(
                MarkerTemplate(
                    id=rec["id"],
                    name=rec["name"],
                    side_m=float(rec["side_m"]),
                    payload=payload,
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: record {i} malformed: {e}") from None
    d = MarkerDictionary(templates)
    d.validate()
    return d


def save_markers(dictionary: MarkerDictionary, path) -> None:
    dictionary.validate()
    recs = [
        {"id": t.id, "name": t.name, "side_m": t.side_m, "payload": t.payload_rows()}
        for t in dictionary.templates
    ]
    with open(path, "w") as fh:
        json.dump(recs, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Homography

def _collinear_triple(pts: np.ndarray) -> bool:
    scale = 0.0
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            scale = max(scale, float(np.hypot(*(pts[i] - pts[j]))))
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            for k in range(j + 1, len(pts)):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                if abs(u[0] * v[1] - u[1] * v[0]) <= 1e-9 * scale * scale:
                    return True
    return False


def _hartley(pts: np.ndarray):
    """Similarity T with T*pts centered and at mean distance sqrt(2)."""
    mean = pts.mean(axis=0)
    d = np.hypot(*(pts - mean).T).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    return T


def homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Plane projective map taking src points to dst points (DLT).

    Both inputs are (n, 2) with n >= 4. Points are Hartley-normalized,
    the 2n x 9 system is solved by SVD, and the result is scaled to unit
    Frobenius norm with H[2, 2] >= 0.

    Raises:
        GeometryError: when any three src or dst points are collinear.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 4 or src.shape[1] != 2:
        raise ValueError(f"need matching (n>=4, 2) point arrays, got {src.shape} and {dst.shape}")
    if _collinear_triple(src) or _collinear_triple(dst):
        raise GeometryError("three correspondence points are collinear")

    Ts, Td = _hartley(src), _hartley(dst)
    sh = np.column_stack([src, np.ones(len(src))]) @ Ts.T
    dh = np.column_stack([dst, np.ones(len(dst))]) @ Td.T

    rows = []
    for (x, y, _), (u, v, _) in zip(sh, dh):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    Hn = vt[-1].reshape(3, 3)

    H = np.linalg.inv(Td) @ Hn @ Ts
    H /= np.linalg.norm(H)
    if H[2, 2] < 0:
        H = -H
    return H


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map (n, 2) points through H, dividing out the projective scale."""
    pts = np.asarray(pts, dtype=np.float64)
    ph = np.column_stack([pts, np.ones(len(pts))]) @ np.asarray(H).T
    return ph[:, :2] / ph[:, 2:3]


# ---------------------------------------------------------------------------
# Sampling and identification

def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros_like(xs, int)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros_like(ys, int)
    fx = xs - x0
    fy = ys - y0
    img = img.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, np.minimum(x0 + 1, w - 1)] * fx
    bot = img[np.minimum(y0 + 1, h - 1), x0] * (1 - fx) + img[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)] * fx
    return top * (1 - fy) + bot * fy


_STENCIL = np.array([(dx, dy) for dy in (-1 / 6, 0.0, 1 / 6) for dx in (-1 / 6, 0.0, 1 / 6)])

_CANON = np.array([(0.0, 0.0), (GRID, 0.0), (GRID, GRID), (0.0, GRID)])


def sample_pattern(img: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Read the 8x8 cell grid inside a quad from a grayscale frame.

    Each cell mean comes from a 3x3 stencil at the cell center offset by
    +-1/6 cell, sampled bilinearly through the canonical-to-image
    homography. Cells strictly below the midpoint of the extreme means
    are black.

    Returns:
        (8, 8) uint8 grid, 1 = black.
    """
    H = homography_from_corners(_CANON, corners)
    jj, ii = np.meshgrid(np.arange(GRID), np.arange(GRID))
    centers = np.column_stack([jj.ravel() + 0.5, ii.ravel() + 0.5])
    pts = (centers[:, None, :] + _STENCIL[None, :, :]).reshape(-1, 2)
    mapped = apply_homography(H, pts)
    samples = _bilinear(np.asarray(img), mapped[:, 0], mapped[:, 1])
    means = samples.reshape(GRID * GRID, len(_STENCIL)).mean(axis=1).reshape(GRID, GRID)
    midpoint = (means.min() + means.max()) / 2.0
    return (means < midpoint).astype(np.uint8)


def match_pattern(
    bits: np.ndarray,
    dictionary: MarkerDictionary,
    min_confidence: float = 0.8,
) -> tuple[int, int, float] | None:
    """Identify an 8x8 sampled grid against the dictionary.

    The outer 28-cell ring must be all black, else no match. Confidence
    is the best fraction of the 36 payload bits agreeing over every
    template and rotation; rotation k means the observed payload equals
    the template payload rotated k quarter turns clockwise. Ties go to
    the lowest id, then the lowest k.

    Returns:
        (marker_id, rotation, confidence), or None when the ring check
        fails or the best confidence is below min_confidence.
    """
    bits = np.asarray(bits)
    if bits.shape != (GRID, GRID):
        raise ValueError(f"expected 8x8 bit grid, got {bits.shape}")
    if not dictionary.templates:
        raise ValueError("empty marker dictionary")
    ring = bits.copy()
    ring[1:-1, 1:-1] = 1
    if not ring.all():
        return None  # frame ring must be solid black
    observed = bits[1:-1, 1:-1]
    best = (-1.0, 0, 0)
    for t in sorted(dictionary.templates, key=lambda t: t.id):
        for k in range(4):
            conf = float(np.mean(observed == _rot_cw(t.payload, k)))
            if conf > best[0]:
                best = (conf, t.id, k)
    conf, marker_id, k = best
    if conf < min_confidence:
        return None
    return marker_id, k, conf


_PROFILE_STEPS = np.linspace(-1.0, 1.0, 13)


def _side_edge_points(img: np.ndarray, a: np.ndarray, b: np.ndarray, span: float) -> np.ndarray:
    """Sub-pixel edge samples along the middle 60% of the side a -> b.

    Probes the gray profile along the outward normal at points spread over
    the side; each probe localizes the ink-to-paper edge at the centroid
    of the profile gradient, which is unbiased under any symmetric blur.
    Probes with too little contrast are dropped.
    """
    side = b - a
    length = float(np.hypot(side[0], side[1]))
    if length < 6.0:
        return np.empty((0, 2))
    d = side / length
    n = np.array([d[1], -d[0]])  # outward for clockwise winding
    m = int(min(64, max(7, round(0.6 * length))))
    ts = np.linspace(0.2, 0.8, m)
    centers = a[None, :] + ts[:, None] * side[None, :]
    probes = centers[:, None, :] + (span * _PROFILE_STEPS)[None, :, None] * n[None, None, :]
    vals = _bilinear(np.asarray(img), probes[..., 0].ravel(), probes[..., 1].ravel())
    vals = vals.reshape(m, len(_PROFILE_STEPS))

    grad = np.clip(np.diff(vals, axis=1), 0.0, None)
    weight = grad.sum(axis=1)
    ok = (vals.max(axis=1) - vals.min(axis=1) >= 64.0) & (weight > 1e-9)
    if not ok.any():
        return np.empty((0, 2))
    half = 0.5 * (_PROFILE_STEPS[1] - _PROFILE_STEPS[0])
    mids = span * (_PROFILE_STEPS[:-1] + half)
    s = (grad[ok] @ mids) / weight[ok]
    return centers[ok] + s[:, None] * n[None, :]


def refine_corners_gray(img: np.ndarray, corners: np.ndarray, iterations: int = 3) -> np.ndarray:
    """Polish quad corners against the grayscale frame.

    The binarized contour localizes each side to the pixel staircase,
    which caps corner accuracy near a quarter pixel. The gray profile
    across the edge carries the remaining precision: each side line is
    refit by total least squares to the mid-level crossings of profiles
    probed along its middle 60%, and adjacent lines are intersected.
    Falls back to the input corners when the polish degrades the quad.
    """
    img = np.asarray(img)
    corners = np.asarray(corners, dtype=np.float64)
    polished = corners.copy()
    for _ in range(iterations):
        lines = []
        for i in range(4):
            a, b = polished[i], polished[(i + 1) % 4]
            length = float(np.hypot(*(b - a)))
            span = float(np.clip(0.45 * length / GRID, 1.0, 2.0))
            pts = _side_edge_points(img, a, b, span)
            if len(pts) >= 4:
                lines.append(imaging._fit_line(pts))
            else:
                d = (b - a) / max(length, 1e-12)
                lines.append((a, np.array([d[1], -d[0]])))
        nxt = np.array(
            [imaging._intersect(lines[i - 1], lines[i], polished[i]) for i in range(4)]
        )
        if not np.isfinite(nxt).all():
            return corners
        polished = nxt
    moved = np.hypot(*(polished - corners).T)
    if moved.max() > 1.5 or not imaging._is_strictly_convex(polished):
        return corners
    if imaging.polygon_area(polished) <= 0.0:
        return corners
    return polished


def _grid_edge_segments(grid: np.ndarray) -> list[tuple[int, int, float, float, int]]:
    """Cell-boundary edge segments of an 8x8 grid, outside treated as white.

    Returns (axis, coord, lo, hi, polarity) tuples in cell units. axis 0 is
    the vertical line x = coord with the segment spanning y in [lo, hi];
    axis 1 is the horizontal line y = coord spanning x. polarity +1 means
    ink lies on the lesser-coordinate side of the line, -1 the greater.
    """
    occ = np.zeros((GRID + 2, GRID + 2), dtype=np.int64)
    occ[1:-1, 1:-1] = grid
    segs = []
    for axis in (0, 1):
        for c in range(GRID + 1):
            run = None
            for r in range(GRID):
                if axis == 0:
                    before, after = occ[r + 1, c], occ[r + 1, c + 1]
                else:
                    before, after = occ[c, r + 1], occ[c + 1, r + 1]
                pol = 0 if before == after else (1 if before else -1)
                if run is not None and pol != run[2]:
                    segs.append((axis, c, float(run[0]), float(run[1]), run[2]))
                    run = None
                if pol and run is None:
                    run = [r, r + 1, pol]
                elif pol:
                    run[1] = r + 1
            if run is not None:
                segs.append((axis, c, float(run[0]), float(run[1]), run[2]))
    return segs


def refine_corners_template(
    img: np.ndarray,
    corners: np.ndarray,
    template: MarkerTemplate,
    iterations: int = 2,
) -> np.ndarray:
    """Register the full cell grid of a matched template against the frame.

    A line fit to a single side is at the mercy of the local pixel phase:
    edges lying near 0, 45 or 90 degrees to the grid produce correlated
    quantization residue that tilts the fitted line by a tenth of a pixel
    or more. Probing every black/white cell boundary of the known pattern
    and fitting one projective transform to all the edge points averages
    many independent phases, so the corner estimate sheds that bias.

    corners must be ordered so corners[0] images the canonical top-left
    cell of the template. Falls back to the input corners whenever the
    registration degenerates or moves a corner more than 1.5 px.
    """
    img = np.asarray(img)
    corners = np.asarray(corners, dtype=np.float64)
    segs = _grid_edge_segments(template.grid8())
    mids = _PROFILE_STEPS[:-1] + 0.5 * (_PROFILE_STEPS[1] - _PROFILE_STEPS[0])
    cur = corners.copy()
    for _ in range(iterations):
        try:
            H = homography_from_corners(_CANON, cur)
        except GeometryError:
            return corners
        lines, pts = [], []
        for axis, coord, lo, hi, pol in segs:
            trim = min(0.3, 0.25 * (hi - lo))
            u = np.linspace(lo + trim, hi - trim, max(3, int(round(6 * (hi - lo)))))
            if axis == 0:
                canon = np.column_stack([np.full_like(u, coord), u])
                lcanon = np.array([1.0, 0.0, -float(coord)])
                dstep = np.array([1e-3, 0.0])
            else:
                canon = np.column_stack([u, np.full_like(u, coord)])
                lcanon = np.array([0.0, 1.0, -float(coord)])
                dstep = np.array([0.0, 1e-3])
            ipts = apply_homography(H, canon)
            dirs = (apply_homography(H, canon + dstep) - ipts) / 1e-3
            cell_px = np.hypot(dirs[:, 0], dirs[:, 1])
            if (cell_px < 1e-9).any():
                continue
            dirs = dirs / cell_px[:, None]
            span = np.clip(0.45 * cell_px, 1.0, 2.0)
            probes = (
                ipts[:, None, :]
                + (span[:, None] * _PROFILE_STEPS[None, :])[:, :, None] * dirs[:, None, :]
            )
            vals = _bilinear(img, probes[..., 0].ravel(), probes[..., 1].ravel())
            vals = vals.reshape(len(u), len(_PROFILE_STEPS))
            grad = np.clip(pol * np.diff(vals, axis=1), 0.0, None)
            weight = grad.sum(axis=1)
            ok = (vals.max(axis=1) - vals.min(axis=1) >= 64.0) & (weight > 1e-9)
            if not ok.any():
                continue
            s = span[ok] * ((grad[ok] @ mids) / weight[ok])
            pts.append(ipts[ok] + s[:, None] * dirs[ok])
            lines.append(np.tile(lcanon, (int(ok.sum()), 1)))
        if not pts:
            return cur
        pts = np.vstack(pts)
        lines = np.vstack(lines)
        if len(pts) < 30:
            return cur

        # point-on-line is linear in the inverse map: l_canon . G q_image = 0
        mean = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.hypot(*(pts - mean).T).mean(), 1e-9)
        T = np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1]])
        qn = np.column_stack([pts, np.ones(len(pts))]) @ T.T
        A = (lines[:, :, None] * qn[:, None, :]).reshape(len(pts), 9)
        weights = np.ones(len(pts))
        Gp = None
        for _ in range(2):  # reweight toward geometric image-space distance
            _, _, vt = np.linalg.svd(A * weights[:, None], full_matrices=False)
            Gp = vt[-1].reshape(3, 3)
            norms = np.hypot(*(lines @ Gp)[:, :2].T)
            weights = 1.0 / np.maximum(norms, 1e-12)
            weights /= weights.mean()
        G = Gp @ T
        try:
            nxt = np.linalg.solve(
                G, np.column_stack([_CANON, np.ones(4)]).T
            ).T
        except np.linalg.LinAlgError:
            return cur
        nxt = nxt[:, :2] / nxt[:, 2:3]
        if not np.isfinite(nxt).all() or np.hypot(*(nxt - corners).T).max() > 1.5:
            return cur
        cur = nxt
    if not imaging._is_strictly_convex(cur) or imaging.polygon_area(cur) <= 0.0:
        return corners
    return cur


@dataclass
class Detection:
    marker_id: int
    corners: np.ndarray  # (4, 2) float64, corners[0] = canonical cell (0,0)
    rotation: int
    confidence: float


@dataclass
class DetectParams:
    threshold: int | None = 128  # None = automatic
    epsilon_frac: float = 0.02
    min_area: float = 100.0
    min_corner_sep: float = 4.0
    min_confidence: float = 0.8


def detect_markers(
    img: np.ndarray,
    dictionary: MarkerDictionary,
    params: DetectParams | None = None,
) -> list[Detection]:
    """Find and identify dictionary marks in a grayscale frame.

    Pipeline: binarize, trace outer contours, keep convex quads, sample
    the cell grid, require a fully black frame ring, match the payload
    against the dictionary, polish the corners against the gray frame.
    Detections below the confidence floor are dropped. Corners are
    reordered so corners[0] is the image of the canonical top-left
    marker corner.

    Returns:
        detections sorted by confidence descending (ties keep pipeline
        order, which is deterministic).
    """
    p = params or DetectParams()
    binary = imaging.binarize(img, p.threshold)
    contours = imaging.trace_contours(binary)
    quads = imaging.detect_quads(
        contours,
        epsilon_frac=p.epsilon_frac,
        min_area=p.min_area,
        min_corner_sep=p.min_corner_sep,
    )
    found = []
    for quad in quads:
        grid = sample_pattern(img, quad)
        match = match_pattern(grid, dictionary, p.min_confidence)
        if match is None:
            continue
        marker_id, k, conf = match
        corners = refine_corners_gray(img, np.roll(quad, -k, axis=0))
        corners = refine_corners_template(img, corners, dictionary.get(marker_id))
        found.append(Detection(marker_id, corners, k, conf))
    found.sort(key=lambda d: -d.confidence)
    return found


def generate_marker_image(template: MarkerTemplate, cell_px: int = 16) -> np.ndarray:
    """Render a template to a printable image with a 2 cell quiet margin.

    Raises:
        ValueError: cell_px below 4 would not survive detection.
    """
    if cell_px < 4:
        raise ValueError(f"cell_px must be at least 4, got {cell_px}")
    grid = template.grid8()
    img = np.full(((GRID + 4) * cell_px, (GRID + 4) * cell_px), 255, dtype=np.uint8)
    tile = np.where(grid == 1, 0, 255).astype(np.uint8)
    scaled = np.kron(tile, np.ones((cell_px, cell_px), dtype=np.uint8))
    ofs = 2 * cell_px
    img[ofs : ofs + GRID * cell_px, ofs : ofs + GRID * cell_px] = scaled
    return img
