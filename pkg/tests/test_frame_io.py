import json

import numpy as np
import pytest

from tofloc.errors import FormatError
from tofloc.frame_io import (GroundTruth, Intrinsics, MaskClass, SegMask, ToFFrame, load_frame, load_ground_truth,
                             load_mask, read_pgm, save_frame, save_mask, write_pgm)
from tofloc.rect import RectModel


def _intr(w=4, h=4):
    return Intrinsics(100.0, 100.0, (w - 1) / 2, (h - 1) / 2, w, h)


def test_uniform_frame_loads_as_two_meters(tmp_path):
    frame = ToFFrame.from_depth(np.full((4, 4), 2.0), _intr())
    save_frame(frame, tmp_path / "f")
    out = load_frame(tmp_path / "f")
    assert out.valid.sum() == 16
    assert np.all(out.depth == 2.0)


def test_zero_depth_pixel_is_invalid(tmp_path):
    depth = np.full((4, 4), 2.0)
    depth[1, 2] = 0.0
    save_frame(ToFFrame.from_depth(depth, _intr()), tmp_path / "f")
    out = load_frame(tmp_path / "f")
    expected = np.ones((4, 4), bool)
    expected[1, 2] = False
    np.testing.assert_array_equal(out.valid, expected)


def test_depth_is_big_endian_millimeters(tmp_path):
    depth = np.full((2, 3), 1.234)
    save_frame(ToFFrame.from_depth(depth, _intr(3, 2)), tmp_path / "f")
    raw = (tmp_path / "f" / "depth.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n65535\n")
    assert raw[-2:] == (1234).to_bytes(2, "big")


@pytest.mark.parametrize("seed", range(100))
def test_random_frame_round_trip(tmp_path, seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 12, 2)
    mm = rng.integers(0, 20001, (h, w))
    intr = Intrinsics(*rng.uniform(50, 300, 2), rng.uniform(0, w), rng.uniform(0, h), int(w), int(h))
    frame = ToFFrame(rng.integers(0, 65536, (h, w)).astype(float), np.where(mm > 0, mm / 1000.0, 0.0), mm > 0, intr)
    as_prefix = bool(seed % 2)
    path = tmp_path / ("p_" if as_prefix else "d")
    save_frame(frame, path, prefix=as_prefix)
    out = load_frame(path)
    np.testing.assert_array_equal(out.depth, frame.depth)
    np.testing.assert_array_equal(out.intensity, frame.intensity)
    np.testing.assert_array_equal(out.valid, frame.valid)
    assert out.intrinsics == intr


def test_far_depth_marked_invalid(tmp_path):
    path = tmp_path / "f"
    save_frame(ToFFrame.from_depth(np.full((4, 4), 2.0), _intr()), path)
    raw = read_pgm(path / "depth.pgm").copy()
    raw[0, 0] = 25000
    write_pgm(path / "depth.pgm", raw, 65535)
    assert not load_frame(path).valid[0, 0]


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1\n# another\n255\n" + bytes([0, 255]))
    np.testing.assert_array_equal(read_pgm(p), [[0, 255]])


def test_size_mismatch_rejected(tmp_path):
    path = tmp_path / "f"
    save_frame(ToFFrame.from_depth(np.full((4, 4), 2.0), _intr()), path)
    write_pgm(path / "intensity.pgm", np.zeros((3, 4), np.uint16), 65535)
    with pytest.raises(FormatError):
        load_frame(path)


def test_malformed_intrinsics_rejected(tmp_path):
    path = tmp_path / "f"
    save_frame(ToFFrame.from_depth(np.full((4, 4), 2.0), _intr()), path)
    meta = json.loads((path / "meta.json").read_text())
    del meta["fx"]
    (path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        load_frame(path)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_frame(tmp_path / "nope")


@pytest.mark.parametrize("fill, count", [(0, 0), (255, 20)])
def test_constant_masks(tmp_path, fill, count):
    write_pgm(tmp_path / "m.pgm", np.full((4, 5), fill, np.uint8), 255)
    assert load_mask(tmp_path / "m.pgm").count == count


def test_random_mask_round_trip(tmp_path, rng):
    for i in range(20):
        m = SegMask(rng.random((7, 9)) < 0.4, MaskClass.FLOOR)
        save_mask(m, tmp_path / f"m{i}.pgm")
        assert load_mask(tmp_path / f"m{i}.pgm", MaskClass.FLOOR) == m


def test_mask_rejects_other_values_and_sizes(tmp_path):
    write_pgm(tmp_path / "m.pgm", np.array([[0, 128]], np.uint8), 255)
    with pytest.raises(FormatError):
        load_mask(tmp_path / "m.pgm")
    write_pgm(tmp_path / "m.pgm", np.array([[0, 255]], np.uint8), 255)
    with pytest.raises(FormatError):
        load_mask(tmp_path / "m.pgm", shape=(2, 2))


def _sidecar(tmp_path, **gt):
    meta = {**_intr().to_dict(), **gt}
    p = tmp_path / "meta.json"
    p.write_text(json.dumps(meta))
    return p


BED = {"cx": 1.0, "cy": 2.0, "theta_deg": 30.0, "width_m": 0.9, "length_m": 2.0}


def test_ground_truth_orientation(tmp_path):
    gt = load_ground_truth(_sidecar(tmp_path, gt_plane_normal=[0, 0, 1], gt_plane_offset=-2.2, gt_bed=BED))
    assert gt.camera_height == pytest.approx(2.2)
    np.testing.assert_allclose(gt.plane_normal, [0, 0, -1])
    assert gt.bed_rect == RectModel(1.0, 2.0, np.radians(30.0), 0.9, 2.0)


def test_ground_truth_renormalizes_near_unit(tmp_path):
    gt = load_ground_truth(_sidecar(tmp_path, gt_plane_normal=[0, 0, 1.0000001], gt_plane_offset=-2.2, gt_bed=BED))
    assert abs(np.linalg.norm(gt.plane_normal) - 1) < 1e-12


def test_ground_truth_rejects_far_from_unit(tmp_path):
    with pytest.raises(FormatError):
        load_ground_truth(_sidecar(tmp_path, gt_plane_normal=[0, 0, 1.1], gt_plane_offset=-2.2, gt_bed=BED))


def test_ground_truth_requires_bed(tmp_path):
    with pytest.raises(FormatError):
        load_ground_truth(_sidecar(tmp_path, gt_plane_normal=[0, 0, 1], gt_plane_offset=-2.2))


def test_ground_truth_round_trip_with_masks(tmp_path, bed_scene):
    _, r = bed_scene
    save_frame(r.frame, tmp_path / "f", r.ground_truth)
    gt = load_ground_truth(tmp_path / "f")
    assert isinstance(gt, GroundTruth)
    assert gt.object_mask == r.object_mask and gt.floor_mask == r.floor_mask
    np.testing.assert_allclose(gt.plane_normal, r.ground_truth.plane_normal, atol=1e-15)
    assert gt.bed_rect.cx == pytest.approx(r.ground_truth.bed_rect.cx, abs=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(-1, 1, 0, 0, 2, 2)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 5, 0, 2, 2)
