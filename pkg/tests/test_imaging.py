"""Frame loading, thresholding, contour tracing and quad filtering."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arsite import imaging
from arsite.errors import FormatError


def pgm_bytes(width, height, raster, maxval=255, magic=b"P5"):
    header = magic + b"\n%d %d\n%d\n" % (width, height, maxval)
    return header + bytes(raster)


# ---------------------------------------------------------------------------
# load_pgm / save_pgm

def test_load_pgm_2x2():
    img = imaging.load_pgm(pgm_bytes(2, 2, [0, 255, 128, 64]))
    assert img.dtype == np.uint8
    assert img.shape == (2, 2)
    assert img.tolist() == [[0, 255], [128, 64]]


def test_load_pgm_1x1():
    img = imaging.load_pgm(pgm_bytes(1, 1, [7]))
    assert img.shape == (1, 1)
    assert img[0, 0] == 7


def test_load_pgm_rejects_color_ppm():
    with pytest.raises(FormatError) as e:
        imaging.load_pgm(pgm_bytes(1, 1, [1, 2, 3], magic=b"P6"))
    assert "byte 0" in str(e.value)


def test_load_pgm_truncated_raster_names_offset():
    data = pgm_bytes(4, 4, [0] * 7)  # needs 16 bytes
    with pytest.raises(FormatError) as e:
        imaging.load_pgm(data)
    assert "byte" in str(e.value)


def test_load_pgm_maxval_over_255():
    with pytest.raises(FormatError) as e:
        imaging.load_pgm(pgm_bytes(1, 1, [0, 0], maxval=65535))
    assert "65535" in str(e.value)


def test_load_pgm_header_comments():
    data = b"P5\n# a comment line\n2 1\n# another\n255\n" + bytes([9, 10])
    img = imaging.load_pgm(data)
    assert img.tolist() == [[9, 10]]


def test_load_pgm_zero_size_rejected():
    with pytest.raises(FormatError):
        imaging.load_pgm(pgm_bytes(0, 4, []))


def test_pgm_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(17, 23), dtype=np.uint8)
    path = tmp_path / "frame.pgm"
    imaging.save_pgm(img, path)
    again = imaging.load_pgm(path)
    assert np.array_equal(img, again)
    # bytes input reads the same picture
    assert np.array_equal(imaging.load_pgm(path.read_bytes()), img)


# ---------------------------------------------------------------------------
# binarize / otsu_threshold

def test_binarize_example():
    img = np.array([[100, 200], [128, 50]], dtype=np.uint8)
    out = imaging.binarize(img, 128)
    assert out.dtype == np.uint8
    assert out.tolist() == [[0, 255], [0, 0]]  # only 200 exceeds 128


def test_binarize_threshold_255_all_black():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
    assert (imaging.binarize(img, 255) == 0).all()


def test_binarize_values_are_two_level():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(12, 12), dtype=np.uint8)
    out = imaging.binarize(img, 77)
    assert set(np.unique(out)) <= {0, 255}


def test_binarize_auto_separates_two_populations():
    img = np.full((20, 20), 20, dtype=np.uint8)
    img[10:] = 220
    t = imaging.otsu_threshold(img)
    assert 20 <= t < 220
    out = imaging.binarize(img, None)
    assert (out[:10] == 0).all()
    assert (out[10:] == 255).all()


def _otsu_reference(img):
    """Exhaustive between-class variance scan, first maximum wins."""
    flat = img.ravel()
    best_t, best_v = 0, -1.0
    for t in range(256):
        lo = flat[flat <= t]
        hi = flat[flat > t]
        if len(lo) == 0 or len(hi) == 0:
            continue
        v = len(lo) * len(hi) * (lo.mean() - hi.mean()) ** 2
        if v > best_v:
            best_t, best_v = t, v
    return best_t


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_otsu_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    # bimodal mixture plus spread, the regime otsu is meant for
    a = rng.normal(60, 25, size=300)
    b = rng.normal(190, 20, size=200)
    img = np.clip(np.concatenate([a, b]), 0, 255).astype(np.uint8).reshape(20, 25)
    assert imaging.otsu_threshold(img) == _otsu_reference(img)


@settings(max_examples=40, deadline=None)
@given(
    data=st.lists(st.integers(0, 255), min_size=9, max_size=9),
    t1=st.integers(0, 255),
    t2=st.integers(0, 255),
)
def test_binarize_monotone_in_threshold(data, t1, t2):
    img = np.array(data, dtype=np.uint8).reshape(3, 3)
    lo, hi = min(t1, t2), max(t1, t2)
    white_lo = int((imaging.binarize(img, lo) == 255).sum())
    white_hi = int((imaging.binarize(img, hi) == 255).sum())
    assert white_hi <= white_lo


# ---------------------------------------------------------------------------
# trace_contours

def test_trace_all_white_empty():
    img = np.full((10, 10), 255, dtype=np.uint8)
    assert imaging.trace_contours(imaging.binarize(img, 128)) == []


def test_trace_square_border():
    img = np.full((20, 20), 255, dtype=np.uint8)
    img[5:15, 5:15] = 0
    contours = imaging.trace_contours(imaging.binarize(img, 128))
    assert len(contours) == 1
    pts = contours[0]
    unique = {tuple(p) for p in pts.tolist()}
    assert len(unique) == 36  # 4*10 - 4 border pixels of a 10x10 block
    for x, y in unique:
        assert 5 <= x <= 14 and 5 <= y <= 14
        assert x in (5, 14) or y in (5, 14)
    # closed chain of 8-neighbors
    closed = np.vstack([pts, pts[:1]])
    steps = np.abs(np.diff(closed, axis=0)).max(axis=1)
    assert (steps <= 1).all()
    # the traced region really encloses 100 pixels (flood-fill oracle)
    from scipy import ndimage

    labels, n = ndimage.label(img == 0, structure=np.ones((3, 3)))
    assert n == 1
    assert int((labels == 1).sum()) == 100


def test_trace_two_squares_raster_order():
    img = np.full((30, 30), 255, dtype=np.uint8)
    img[18:26, 3:11] = 0   # lower left
    img[2:10, 16:24] = 0   # upper right: raster-first region
    contours = imaging.trace_contours(imaging.binarize(img, 128))
    assert len(contours) == 2
    assert contours[0][:, 1].min() < contours[1][:, 1].min()


def test_trace_points_sit_on_region_boundary():
    rng = np.random.default_rng(7)
    img = np.full((40, 40), 255, dtype=np.uint8)
    for _ in range(4):  # a few random blobs
        x, y = rng.integers(4, 30, size=2)
        w, h = rng.integers(3, 9, size=2)
        img[y : y + h, x : x + w] = 0
    mask = img == 0
    padded = np.pad(mask, 1)
    for contour in imaging.trace_contours(imaging.binarize(img, 128)):
        for x, y in contour.tolist():
            assert mask[y, x]
            neighborhood = [
                padded[y, x + 1],
                padded[y + 2, x + 1],
                padded[y + 1, x],
                padded[y + 1, x + 2],
            ]
            assert not all(neighborhood)  # some 4-neighbor is white or outside


def test_trace_accepts_bool_mask():
    img = np.full((12, 12), 255, dtype=np.uint8)
    img[3:9, 3:9] = 0
    a = imaging.trace_contours(imaging.binarize(img, 128))
    b = imaging.trace_contours(img == 0)
    assert len(a) == len(b) == 1
    assert np.array_equal(a[0], b[0])


# ---------------------------------------------------------------------------
# detect_quads

def _square_quads(size=50, origin=25, frame=100):
    img = np.full((frame, frame), 255, dtype=np.uint8)
    img[origin : origin + size, origin : origin + size] = 0
    contours = imaging.trace_contours(imaging.binarize(img, 128))
    return imaging.detect_quads(contours)


def test_detect_quads_axis_aligned_square():
    quads = _square_quads()
    assert len(quads) == 1
    truth = np.array([[25, 25], [74, 25], [74, 74], [25, 74]], dtype=np.float64)
    err = np.hypot(*(quads[0] - truth).T)
    assert err.max() < 1.5


def test_detect_quads_clockwise_convex_anchored():
    (quad,) = _square_quads()
    assert imaging.polygon_area(quad) > 0  # clockwise in y-down coords
    # strict convexity: consecutive edge cross products share sign
    d = np.roll(quad, -1, axis=0) - quad
    cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
    assert (cross > 0).all()
    # corner 0 is the northwest-most corner
    sums = quad.sum(axis=1)
    assert sums[0] == sums.min()


def test_detect_quads_drops_circle():
    img = np.full((100, 100), 255, dtype=np.uint8)
    yy, xx = np.mgrid[0:100, 0:100]
    img[(xx - 50) ** 2 + (yy - 50) ** 2 <= 30 * 30] = 0
    contours = imaging.trace_contours(imaging.binarize(img, 128))
    assert len(contours) == 1
    assert imaging.detect_quads(contours) == []


def test_detect_quads_drops_tiny_square():
    img = np.full((20, 20), 255, dtype=np.uint8)
    img[8:11, 8:11] = 0
    contours = imaging.trace_contours(imaging.binarize(img, 128))
    assert imaging.detect_quads(contours, min_area=100.0) == []


def test_pipeline_deterministic():
    rng = np.random.default_rng(11)
    img = rng.integers(0, 256, size=(60, 60), dtype=np.uint8)
    img[10:40, 10:40] = 0

    def run():
        binary = imaging.binarize(img, 128)
        contours = imaging.trace_contours(binary)
        return imaging.detect_quads(contours)

    a, b = run(), run()
    assert len(a) == len(b)
    for qa, qb in zip(a, b):
        assert np.array_equal(qa, qb)
