import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from raylift.geometry import (SE3, CameraModel, CameraRig, GeometryError, MissingPoseError,
                              PixelOutOfBounds, gravity_align, hull_box, intersect_rays,
                              lift_dense, lift_keypoints, project, ray_points, rot_z,
                              unproject)

# camera looking along world +x with image x to the right (-y) and image y down (-z)
FORWARD_X = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])

angles = st.floats(-np.pi, np.pi, allow_nan=False)
coords = st.floats(-50, 50, allow_nan=False)


def random_pose(rng) -> SE3:
    return SE3(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(),
               rng.uniform(-5, 5, 3))


def single_camera_rig(cam, extrinsics, poses):
    return CameraRig((cam,) * len(extrinsics), tuple(extrinsics), poses)


# ---------------------------------------------------------------- SE3

def test_se3_compose_and_inverse(rng):
    a, b = random_pose(rng), random_pose(rng)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    np.testing.assert_allclose((a @ a.inverse()).matrix(), np.eye(4), atol=1e-12)
    assert (a @ b).is_valid()


# ---------------------------------------------------------------- unproject / project

def test_unproject_principal_ray():
    cam = CameraModel(1, 1, 0, 0, 10, 10)
    np.testing.assert_allclose(unproject(cam, [0, 0]), [0, 0, 1])


def test_unproject_45_degrees():
    cam = CameraModel(100, 100, 0, 0, 200, 200)
    np.testing.assert_allclose(unproject(cam, [100, 0]), np.array([1, 0, 1]) / np.sqrt(2))


def test_unproject_anisotropic_focal():
    cam = CameraModel(200, 100, 320, 240, 640, 480)
    d = unproject(cam, [420, 340])
    # (0.5, 1, 1) has norm 1.5
    np.testing.assert_allclose(d, [1 / 3, 2 / 3, 2 / 3], atol=1e-15)
    uv, vis = project(cam, SE3(), 3.0 * d)
    assert vis
    np.testing.assert_allclose(uv, [420, 340], atol=1e-9)


def test_unproject_rejects_out_of_bounds():
    cam = CameraModel(100, 100, 50, 50, 100, 100)
    with pytest.raises(PixelOutOfBounds):
        unproject(cam, [101, 5])


def test_project_on_axis():
    cam = CameraModel(100, 100, 50, 50, 100, 100)
    uv, vis = project(cam, SE3(), [0, 0, 2])
    assert vis
    np.testing.assert_allclose(uv, [50, 50])


def test_project_behind_camera_is_invisible():
    cam = CameraModel(100, 100, 50, 50, 100, 100)
    _, vis = project(cam, SE3(), [0, 0, -1])
    assert not vis


def test_project_off_axis_pixel():
    cam = CameraModel(100, 100, 0, 0, 100, 100)
    uv, _ = project(cam, SE3(), [1, 0, 2])
    assert uv[0] == pytest.approx(50.0)


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(GeometryError):
        CameraModel(0, 1, 1, 1, 2, 2)
    with pytest.raises(GeometryError):
        CameraModel(1, 1, 5, 1, 2, 2)


@given(u=st.floats(0.01, 639.99), v=st.floats(0.01, 479.99), depth=st.floats(0.1, 100),
       seed=st.integers(0, 2 ** 31 - 1))
def test_round_trip_through_any_pose(u, v, depth, seed):
    cam = CameraModel(300, 280, 320, 240, 640, 480)
    pose = random_pose(np.random.default_rng(seed))
    world = pose.apply(depth * unproject(cam, [u, v]))
    uv, vis = project(cam, pose, world)
    assert vis
    np.testing.assert_allclose(uv, [u, v], atol=1e-6)


# ---------------------------------------------------------------- gravity alignment

def test_gravity_align_identity():
    np.testing.assert_allclose(gravity_align(SE3()).matrix(), np.eye(4))


def test_gravity_align_removes_roll():
    roll = FORWARD_X @ Rotation.from_euler("z", 30, degrees=True).as_matrix()
    out = gravity_align(SE3(roll, [0.5, -1, 2]))
    np.testing.assert_allclose(out.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(out.translation, [0.5, -1, 2])


def test_gravity_align_keeps_yaw_only():
    # oracle: build yaw 90 / pitch 20 with scipy's intrinsic Euler angles
    R = Rotation.from_euler("ZY", [90, -20], degrees=True).as_matrix() @ FORWARD_X
    out = gravity_align(SE3(R, [1, 2, 3]))
    np.testing.assert_allclose(out.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    np.testing.assert_allclose(out.translation, [1, 2, 3])


def test_gravity_align_vertical_camera_uses_camera_x():
    looking_down = np.diag([1.0, -1.0, -1.0])
    out = gravity_align(SE3(rot_z(0.7) @ looking_down))
    np.testing.assert_allclose(out.rotation, rot_z(0.7), atol=1e-12)


@given(seed=st.integers(0, 2 ** 31 - 1))
def test_gravity_align_idempotent_and_upright(seed):
    g = gravity_align(random_pose(np.random.default_rng(seed)))
    np.testing.assert_allclose(g.rotation[:, 2], [0, 0, 1])
    assert g.is_valid()
    np.testing.assert_allclose(gravity_align(g).matrix(), g.matrix(), atol=1e-12)


# ---------------------------------------------------------------- lifting

def _up_camera_rig(offsets, T=1):
    cam = CameraModel(100, 100, 50, 50, 100, 100)
    extr = [SE3(np.eye(3), o) for o in offsets]
    return single_camera_rig(cam, extr, np.tile(np.eye(4), (T, 1, 1)))


def test_lift_principal_ray_through_origin():
    rig = _up_camera_rig([[0, 0, 0]])
    kp = np.zeros((17, 3))
    kp[0] = [50, 50, 1]
    cloud = lift_keypoints(rig, {(0, 0): kp}, (0, 1))
    np.testing.assert_allclose(cloud.rays[0, 0, 0], [0, 0, 1, 0, 0, 0, 1], atol=1e-15)


def test_lift_moment_of_translated_camera():
    rig = _up_camera_rig([[0, 0, 0], [1, 0, 0]])
    kp = np.zeros((17, 3))
    kp[0] = [50, 50, 1]
    cloud = lift_keypoints(rig, {(0, 1): kp}, (0, 1))
    np.testing.assert_allclose(cloud.rays[0, 1, 0, :6], [0, 0, 1, 0, -1, 0], atol=1e-15)
    assert not cloud.rays[0, 0].any()


def test_lift_empty_detections():
    rig = _up_camera_rig([[0, 0, 0], [1, 0, 0]], T=5)
    cloud = lift_keypoints(rig, {}, (0, 5))
    assert cloud.shape == (5, 2, 17, 7)
    assert not cloud.rays.any()


def test_lift_missing_pose():
    rig = _up_camera_rig([[0, 0, 0]], T=3)
    kp = np.zeros((4, 1, 17, 3))
    kp[3, 0, 0] = [50, 50, 1]
    with pytest.raises(MissingPoseError):
        lift_dense(rig, kp, 0)


def test_lift_rejects_detection_outside_window():
    rig = _up_camera_rig([[0, 0, 0]], T=3)
    with pytest.raises(GeometryError):
        lift_keypoints(rig, {(2, 0): np.zeros((17, 3))}, (0, 2))


# ---------------------------------------------------------------- helpers

def test_hull_box_min_size_and_dilation():
    np.testing.assert_allclose(hull_box(np.array([[10.0, 10.0]]), 0.1, 20), [0, 0, 20, 20])
    np.testing.assert_allclose(hull_box(np.array([[0.0, 0.0], [10, 20]]), 0.1), [-0.5, -1, 10.5, 21])


def test_intersect_perpendicular_rays():
    target = np.array([1.0, 2.0, 3.0])
    d = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    x, ok = intersect_rays(d, target - 4 * d)
    assert ok
    np.testing.assert_allclose(x, target, atol=1e-9)


def test_intersect_single_ray_invalid():
    x, ok = intersect_rays(np.array([[0.0, 0, 1]]), np.zeros((1, 3)))
    assert not ok
    np.testing.assert_array_equal(x, 0)


def test_intersect_needs_angular_separation():
    d = np.array([[0, 0, 1.0], [np.sin(1e-3), 0, np.cos(1e-3)]])
    _, ok = intersect_rays(d, np.zeros((2, 3)))
    assert not ok


def test_ray_points_lie_on_line(rng):
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = rng.normal(size=(20, 3))
    rays = np.concatenate([d, np.cross(o, d)], axis=1)
    p = ray_points(rays)
    off = np.cross(p - o, d)
    np.testing.assert_allclose(off, 0, atol=1e-12)
