"""Marker dictionary, homography, pattern sampling and identification."""

import numpy as np
import pytest

from arsite import imaging, marker, synth
from arsite.errors import FormatError, GeometryError


def rot_cw(grid, k):
    return np.rot90(grid, -k)


def make_template(mid, payload, name="t", side_m=0.2):
    return marker.MarkerTemplate(
        id=mid, name=name, side_m=side_m, payload=np.asarray(payload, dtype=np.uint8)
    )


DICT = marker.default_dictionary()


# ---------------------------------------------------------------------------
# dictionary

def test_default_dictionary_shape():
    assert [t.id for t in DICT.templates] == [1, 2, 3, 4]
    names = {t.name for t in DICT.templates}
    assert names == {"Burnt Palace", "Pyramid B", "Pyramid C", "Shrine"}
    for t in DICT.templates:
        assert t.payload.shape == (6, 6)
        assert t.side_m > 0


def test_default_dictionary_pairwise_hamming():
    for i, a in enumerate(DICT.templates):
        for b in DICT.templates[i + 1 :]:
            for k in range(4):
                d = int(np.sum(a.payload != rot_cw(b.payload, k)))
                assert d >= 10, (a.id, b.id, k, d)


def test_validate_rejects_rotational_symmetry():
    sym = make_template(9, np.zeros((6, 6)))  # invariant under every rotation
    with pytest.raises(FormatError) as e:
        marker.MarkerDictionary([sym]).validate()
    assert "symmetric" in str(e.value)


def test_validate_rejects_close_pair():
    base = DICT.templates[0]
    near = base.payload.copy()
    near[0, 0] ^= 1  # hamming distance 1
    pair = marker.MarkerDictionary([base, make_template(99, near)])
    with pytest.raises(FormatError) as e:
        pair.validate()
    assert "bits" in str(e.value)


def test_validate_rejects_duplicate_ids():
    t = DICT.templates[0]
    with pytest.raises(FormatError):
        marker.MarkerDictionary([t, make_template(t.id, DICT.templates[1].payload)]).validate()


def test_markers_file_round_trip(tmp_path):
    path = tmp_path / "markers.json"
    marker.save_markers(DICT, path)
    loaded = marker.load_markers(path)
    assert len(loaded.templates) == len(DICT.templates)
    for a, b in zip(DICT.templates, loaded.templates):
        assert (a.id, a.name, a.side_m) == (b.id, b.name, b.side_m)
        assert np.array_equal(a.payload, b.payload)


def test_load_markers_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"not": "a list"}')
    with pytest.raises(FormatError):
        marker.load_markers(path)
    path.write_text('[{"id": 1, "name": "x", "side_m": 0.2, "payload": ["000110"]}]')
    with pytest.raises(FormatError):
        marker.load_markers(path)


# ---------------------------------------------------------------------------
# homography

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_homography_identity():
    H = marker.homography_from_corners(UNIT_SQUARE, UNIT_SQUARE)
    assert np.allclose(H / H[2, 2], np.eye(3), atol=1e-12)


def test_homography_pure_scale():
    H = marker.homography_from_corners(UNIT_SQUARE, 2.0 * UNIT_SQUARE)
    assert np.allclose(H / H[2, 2], np.diag([2.0, 2.0, 1.0]), atol=1e-12)


def test_homography_normalization_invariants():
    H = marker.homography_from_corners(UNIT_SQUARE, 2.0 * UNIT_SQUARE + 3.0)
    assert np.isclose(np.linalg.norm(H), 1.0)
    assert H[2, 2] >= 0


@pytest.mark.parametrize("seed", range(8))
def test_homography_substitution(seed):
    rng = np.random.default_rng(seed)
    dst = UNIT_SQUARE * 40 + rng.uniform(-8, 8, size=(4, 2)) + 20
    assert imaging.polygon_area(dst) > 0  # perturbation keeps it convex clockwise
    H = marker.homography_from_corners(UNIT_SQUARE, dst)
    mapped = marker.apply_homography(H, UNIT_SQUARE)
    assert np.abs(mapped - dst).max() < 1e-9


def test_homography_collinear_rejected():
    src = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(GeometryError):
        marker.homography_from_corners(src, UNIT_SQUARE)


def test_apply_homography_inverse_round_trip():
    H = marker.homography_from_corners(UNIT_SQUARE, UNIT_SQUARE * 3 + [5, 1])
    pts = np.array([[0.2, 0.7], [0.9, 0.1], [0.5, 0.5]])
    back = marker.apply_homography(np.linalg.inv(H), marker.apply_homography(H, pts))
    assert np.abs(back - pts).max() < 1e-9


# ---------------------------------------------------------------------------
# sample_pattern

def _scene(tpl, yaw=0.0, pitch=0.0, roll=0.0, t=(0.0, 0.0, 0.6), **kw):
    pose = synth.pose_from_euler(yaw, pitch, roll, t)
    return synth.SynthScene(template=tpl, pose=pose, **kw)


def test_sample_pattern_fronto_parallel():
    tpl = DICT.templates[0]
    scene = _scene(tpl)
    img = synth.render_marker(scene)
    grid = marker.sample_pattern(img, synth.projected_corners(scene))
    assert np.array_equal(grid, tpl.grid8())


def test_sample_pattern_45_deg_yaw():
    tpl = DICT.templates[2]
    scene = _scene(tpl, yaw=45.0)
    img = synth.render_marker(scene)
    grid = marker.sample_pattern(img, synth.projected_corners(scene))
    assert np.array_equal(grid, tpl.grid8())


def test_sample_pattern_uniform_gray_all_zero():
    img = np.full((100, 100), 128, dtype=np.uint8)
    quad = np.array([[20.0, 20.0], [80.0, 20.0], [80.0, 80.0], [20.0, 80.0]])
    assert not marker.sample_pattern(img, quad).any()


# ---------------------------------------------------------------------------
# match_pattern

def test_match_exact_template():
    assert marker.match_pattern(DICT.templates[0].grid8(), DICT) == (1, 0, 1.0)


def test_match_rotated_payload():
    bits = DICT.templates[0].grid8()
    bits[1:-1, 1:-1] = rot_cw(DICT.templates[0].payload, 1)
    assert marker.match_pattern(bits, DICT) == (1, 1, 1.0)


def test_match_rotation_coherence():
    for t in DICT.templates:
        for k in range(4):
            got = marker.match_pattern(rot_cw(t.grid8(), k), DICT)
            assert got == (t.id, k, 1.0), (t.id, k, got)


def test_match_broken_ring_rejected():
    bits = DICT.templates[0].grid8()
    bits[0, 3] = 0  # one white ring cell
    assert marker.match_pattern(bits, DICT) is None


def test_match_far_pattern_rejected():
    """A payload 18 bits from template 1 and >= 8 bits from every
    template at every rotation scores at most 28/36 < 0.80."""
    base = DICT.templates[0].payload
    rng = np.random.default_rng(2)
    for _ in range(200):
        flips = rng.choice(36, size=18, replace=False)
        obs = base.copy().ravel()
        obs[flips] ^= 1
        obs = obs.reshape(6, 6)
        dists = [
            int(np.sum(obs != rot_cw(t.payload, k)))
            for t in DICT.templates
            for k in range(4)
        ]
        if min(dists) >= 8:
            break
    else:
        pytest.fail("no suitable far pattern found")
    assert int(np.sum(obs != base)) == 18
    bits = np.ones((8, 8), dtype=np.uint8)
    bits[1:-1, 1:-1] = obs
    assert marker.match_pattern(bits, DICT, 0.80) is None


def test_match_tie_breaks_to_lowest_id():
    """A pattern equidistant from two templates matches the lower id."""
    rng = np.random.default_rng(0)
    for _ in range(500):
        p_lo = rng.integers(0, 2, size=(6, 6), dtype=np.uint8)
        diff = rng.choice(36, size=10, replace=False)
        p_hi = p_lo.copy().ravel()
        p_hi[diff] ^= 1
        p_hi = p_hi.reshape(6, 6)
        # listed high id first: result must not depend on list order
        cand = marker.MarkerDictionary([make_template(7, p_hi), make_template(3, p_lo)])
        try:
            cand.validate()
        except FormatError:
            continue
        obs = p_lo.copy().ravel()
        obs[diff[:5]] ^= 1  # 5 from p_lo, 5 from p_hi
        obs = obs.reshape(6, 6)
        dists = {
            (t.id, k): int(np.sum(obs != rot_cw(t.payload, k)))
            for t in cand.templates
            for k in range(4)
        }
        tied = {key for key, d in dists.items() if d == 5}
        if min(dists.values()) == 5 and tied == {(3, 0), (7, 0)}:
            break
    else:
        pytest.fail("no tie construction found")
    bits = np.ones((8, 8), dtype=np.uint8)
    bits[1:-1, 1:-1] = obs
    assert marker.match_pattern(bits, cand, 0.8) == (3, 0, 31 / 36)


def test_match_shape_and_empty_dictionary_errors():
    with pytest.raises(ValueError):
        marker.match_pattern(np.ones((6, 6)), DICT)
    with pytest.raises(ValueError):
        marker.match_pattern(np.ones((8, 8)), marker.MarkerDictionary([]))


# ---------------------------------------------------------------------------
# generate_marker_image

def test_generate_all_white_payload():
    tpl = make_template(50, np.zeros((6, 6)))
    img = marker.generate_marker_image(tpl, cell_px=8)
    assert img.shape == (96, 96)
    assert (img[:16] == 255).all() and (img[:, :16] == 255).all()  # margin
    assert (img[16:24, 16:80] == 0).all()   # top ring band
    assert (img[16:80, 72:80] == 0).all()   # right ring band
    assert (img[24:72, 24:72] == 255).all()  # white payload interior


def test_generate_cell_px_floor():
    with pytest.raises(ValueError):
        marker.generate_marker_image(DICT.templates[0], cell_px=3)


def test_generate_detect_sample_round_trip():
    for tpl in DICT.templates:
        img = marker.generate_marker_image(tpl, cell_px=12)
        contours = imaging.trace_contours(imaging.binarize(img, 128))
        quads = imaging.detect_quads(contours)
        assert len(quads) == 1
        grid = marker.sample_pattern(img, quads[0])
        assert np.array_equal(grid, tpl.grid8())


# ---------------------------------------------------------------------------
# detect_markers

def test_detect_single_marker():
    tpl = DICT.templates[1]
    scene = _scene(tpl, yaw=20.0, pitch=-25.0, roll=10.0, t=(0.03, -0.02, 0.7))
    img = synth.render_marker(scene)
    dets = marker.detect_markers(img, DICT)
    assert len(dets) == 1
    d = dets[0]
    assert d.marker_id == tpl.id
    assert d.confidence == 1.0
    assert imaging.polygon_area(d.corners) > 0


def test_detect_two_markers_one_frame():
    frame = np.full((480, 640), 255, dtype=np.uint8)
    a = marker.generate_marker_image(DICT.templates[0], cell_px=8)
    b = marker.generate_marker_image(DICT.templates[3], cell_px=8)
    frame[60 : 60 + a.shape[0], 80 : 80 + a.shape[1]] = a
    frame[240 : 240 + b.shape[0], 380 : 380 + b.shape[1]] = b
    dets = marker.detect_markers(frame, DICT)
    assert sorted(d.marker_id for d in dets) == [1, 4]
    for d in dets:
        assert d.rotation == 0
        assert d.confidence == 1.0


def test_detect_uniform_noise_finds_nothing():
    rng = np.random.default_rng(123)
    img = rng.integers(0, 256, size=(240, 320), dtype=np.uint8)
    assert marker.detect_markers(img, DICT) == []


def test_detect_deterministic():
    tpl = DICT.templates[2]
    scene = _scene(tpl, yaw=-30.0, pitch=15.0, t=(0.0, 0.01, 0.8), noise_sigma=4.0, seed=9)
    img = synth.render_marker(scene)
    d1 = marker.detect_markers(img, DICT)
    d2 = marker.detect_markers(img, DICT)
    assert len(d1) == len(d2) == 1
    assert np.array_equal(d1[0].corners, d2[0].corners)
    assert (d1[0].marker_id, d1[0].rotation) == (d2[0].marker_id, d2[0].rotation)
