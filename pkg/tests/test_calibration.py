import math

import numpy as np
import pytest

from oracles import angle_deg, random_tilted_plane, sample_plane
from tofloc.calibration import (GroundPlane, RansacParams, build_ground_transform, calibrate, compute_height_map,
                                fit_plane_svd, ransac_plane, ransac_samples, transform_normals)
from tofloc.errors import ConsensusError, DegenerateError
from tofloc.pointcloud import FrameTag, backproject, estimate_normals
from tofloc.synth import Bed, CameraPose, Room, SceneSpec, render_scene


def test_svd_horizontal_square():
    plane = fit_plane_svd([(0, 0, 2), (1, 0, 2), (0, 1, 2), (1, 1, 2)])
    np.testing.assert_allclose(plane.normal, [0, 0, -1], atol=1e-12)
    assert plane.offset == pytest.approx(2.0)
    assert plane.rms_residual < 1e-12


def test_svd_three_points_on_x_plus_z():
    plane = fit_plane_svd([(3, 0, 0), (0, 0, 3), (1, 5, 2)])
    np.testing.assert_allclose(plane.normal, -np.array([1, 0, 1]) / math.sqrt(2), atol=1e-12)
    assert plane.offset == pytest.approx(3 / math.sqrt(2))


@pytest.mark.parametrize("pts", [[(0, 0, 1), (1, 1, 1)], [(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 3)],
                                 [(1, 2, 3)] * 5])
def test_svd_degenerate(pts):
    with pytest.raises(DegenerateError):
        fit_plane_svd(pts)


def test_svd_noisy_planes_within_tolerance():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, p0 = random_tilted_plane(rng)
        plane = fit_plane_svd(sample_plane(rng, n, p0, 500, sigma=0.005))
        worst = max(worst, angle_deg(plane.normal, n))
    assert worst <= 0.3


def test_ransac_exact_plane(backend, rng):
    n, p0 = random_tilted_plane(rng)
    plane = ransac_plane(sample_plane(rng, n, p0, 400))
    assert plane.inlier_fraction == 1.0
    assert angle_deg(plane.normal, n) < 1e-6
    assert plane.offset > 0


def test_ransac_with_outliers(backend):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, p0 = random_tilted_plane(rng)
        inl = sample_plane(rng, n, p0, 700, sigma=0.005)
        out = rng.uniform(-1.5, 1.5, (300, 3)) + [0, 0, 2.0]
        plane = ransac_plane(np.vstack([inl, out]), iterations=200)
        worst = max(worst, angle_deg(plane.normal, n))
    assert worst <= 0.5


def test_ransac_pure_noise_fails(backend):
    pts = np.random.default_rng(3).uniform(0, 3, (2000, 3))
    with pytest.raises(ConsensusError) as exc:
        ransac_plane(pts, min_inlier_fraction=0.5)
    assert exc.value.best_fraction < 0.5


def test_ransac_is_bit_reproducible(rng):
    pts = np.vstack([sample_plane(rng, *random_tilted_plane(rng), 600, sigma=0.01), rng.uniform(0, 3, (400, 3))])
    a = ransac_plane(pts)
    b = ransac_plane(pts)
    assert np.array_equal(a.normal, b.normal) and a.offset == b.offset
    np.testing.assert_array_equal(a.inliers, b.inliers)


def test_ransac_backends_agree(rng):
    from tofloc import _accel

    if not _accel.HAVE_NUMBA:
        pytest.skip("numba unavailable")
    pts = np.vstack([sample_plane(rng, *random_tilted_plane(rng), 600, sigma=0.01), rng.uniform(0, 3, (400, 3))])
    with _accel.using_backend("numpy"):
        a = ransac_plane(pts)
    with _accel.using_backend("numba"):
        b = ransac_plane(pts)
    assert np.array_equal(a.as_array(), b.as_array())
    np.testing.assert_array_equal(a.inliers, b.inliers)


def test_samples_depend_only_on_seed_and_index():
    a = ransac_samples(100, 10, 42)
    b = ransac_samples(100, 20, 42)
    np.testing.assert_array_equal(a, b[:10])
    assert all(len(set(r)) == 3 for r in a)


def test_straight_down_transform():
    T = build_ground_transform(GroundPlane(np.array([0.0, 0.0, -1.0]), 2.2))
    assert T.yaw_fallback
    np.testing.assert_allclose(T.apply(np.zeros(3)), [0, 0, 2.2])
    np.testing.assert_allclose(T.apply([0, 0, 2.2]), [0, 0, 0], atol=1e-12)


def _rotation_ok(R):
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_pitched_camera_floor_maps_to_zero():
    spec = SceneSpec(Room(walls=False), None, CameraPose(0, 0, 2.2, 30.0))
    r = render_scene(spec)
    gt = r.ground_truth
    T = build_ground_transform(GroundPlane(gt.plane_normal, gt.plane_offset))
    _rotation_ok(T.rotation)
    pts, _ = backproject(r.frame).valid_points()
    assert np.max(np.abs(T.apply(pts)[:, 2])) < 1e-6
    np.testing.assert_allclose(T.apply(np.zeros(3)), [0, 0, 2.2], atol=1e-12)
    # ground x lies in the image plane, so it has no optical-axis component
    assert abs(T.rotation[0, 2]) < 1e-12


def test_transform_is_idempotent():
    spec = SceneSpec(Room(walls=False), None, CameraPose(0, 0, 2.5, 40.0, 8.0, 30.0), noise_sigma=0.003)
    cloud = backproject(render_scene(spec).frame)
    cal = calibrate(cloud)
    q = cal.transform.apply(cloud.points[cal.inlier_mask])
    # express the refit plane in the camera convention (normal toward origin) by shifting down
    shifted = q - [0, 0, cal.transform.translation_z]
    second = build_ground_transform(fit_plane_svd(shifted))
    np.testing.assert_allclose(second.rotation, np.eye(3), atol=1e-6)


def test_dof_reduction_leaves_planar_motion():
    # Two cameras at the same height and tilt but different floor positions and headings
    # see floors that differ only by a planar rigid motion in the ground frame.
    pose_a = CameraPose(0.0, 0.0, 2.3, 50.0, 4.0, 10.0)
    pose_b = CameraPose(1.2, -0.7, 2.3, 50.0, 4.0, 75.0)
    for pose in (pose_a, pose_b):
        r = render_scene(SceneSpec(Room(walls=False), None, pose))
        gt = r.ground_truth
        T = build_ground_transform(GroundPlane(gt.plane_normal, gt.plane_offset))
        assert T.translation_z == pytest.approx(2.3)
        # tilt and roll are absorbed: the ground z axis is the floor normal
        np.testing.assert_allclose(T.rotate(gt.plane_normal), [0, 0, 1], atol=1e-12)


def _bed_scene():
    return SceneSpec(bed=Bed(0.3, 0.2, 25.0, height_m=0.55), camera=CameraPose(-1.8, 0.0, 2.4, 55.0))


def test_heights_of_floor_and_bed_top():
    r = render_scene(_bed_scene())
    cloud = backproject(r.frame)
    cal = calibrate(cloud, r.floor_mask)
    hm = compute_height_map(cloud, cal.transform)
    assert np.all(np.abs(hm.heights[cal.inlier_mask]) <= 0.02)
    top = r.hit == 3
    top &= np.isclose(r.world_points[..., 2], 0.55)
    assert top.sum() > 100
    np.testing.assert_allclose(hm.heights[top], 0.55, atol=1e-3)
    assert not hm.valid[~r.frame.valid].any()


@pytest.mark.parametrize("sigma, stat, limit", [(0.0, 100, 2.0), (0.002, 50, 2.0)])
def test_floor_normals_map_to_up(sigma, stat, limit):
    r = render_scene(SceneSpec(Room(walls=False), None, CameraPose(0, 0, 2.2, 45.0), noise_sigma=sigma))
    cloud = backproject(r.frame)
    cal = calibrate(cloud)
    ground = transform_normals(estimate_normals(cloud), cal.transform)
    assert ground.frame_tag == FrameTag.GROUND
    n = ground.normals[ground.has_normal]
    ang = np.degrees(np.arccos(np.clip(n[:, 2], -1, 1)))
    # noiseless: every normal; 2 mm noise on 10-point patches: the median
    assert np.percentile(ang, stat) <= limit
    with pytest.raises(ValueError):
        transform_normals(ground, cal.transform)


def test_calibrate_masked_ignores_bed():
    r = render_scene(_bed_scene())
    cal = calibrate(backproject(r.frame), r.floor_mask, RansacParams())
    assert angle_deg(cal.plane.normal, r.ground_truth.plane_normal) < 1e-6
    assert not (cal.inlier_mask & ~r.floor_mask.label).any()


def test_calibration_dict_round_trip():
    from tofloc.calibration import Calibration

    r = render_scene(_bed_scene())
    cal = calibrate(backproject(r.frame), r.floor_mask)
    back = Calibration.from_dict(cal.to_dict(0.1))
    np.testing.assert_array_equal(back.transform.rotation, cal.transform.rotation)
    assert back.transform.translation_z == cal.transform.translation_z
