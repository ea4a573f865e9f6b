import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from raylift.body_model import (COCO_NAMES, DEFAULT_SKELETON as SKEL, NUM_BETAS, NUM_JOINTS, J,
                                BodyState, DegenerateRotation, MotionClip, axis_angle_to_theta,
                                forward_kinematics, joint_velocity, matrix_to_rot6d,
                                observed_keypoints, rot6d_to_matrix, theta_to_axis_angle,
                                transform_states)

seeds = st.integers(0, 2 ** 31 - 1)


def random_state(rng, lead=()) -> BodyState:
    n = int(np.prod(lead)) if lead else 1
    theta = Rotation.from_rotvec(rng.normal(0, 0.5, (n * NUM_JOINTS, 3))).as_matrix()
    omega = Rotation.random(n, random_state=rng.integers(1 << 31)).as_matrix()
    return BodyState(matrix_to_rot6d(theta).reshape(lead + (NUM_JOINTS, 6)),
                     rng.uniform(-3, 3, lead + (NUM_BETAS,)),
                     matrix_to_rot6d(omega).reshape(lead + (6,)),
                     rng.normal(0, 2, lead + (3,)))


# Independent oracle: QR-based 6D decoding and a recursive traversal.
def _oracle_rot(r6):
    A = np.stack([r6[:3], r6[3:]], axis=1)
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    return np.column_stack([Q, np.cross(Q[:, 0], Q[:, 1])])


def oracle_fk(state: BodyState):
    scale = 1.0 + state.beta @ SKEL.shape_basis
    root = _oracle_rot(state.omega)
    cache = {}

    def visit(j):
        if j not in cache:
            if j == 0:
                cache[j] = (root @ _oracle_rot(state.theta[0]), state.tau.copy())
            else:
                p = SKEL.parents[j]
                Gp, Pp = visit(p)
                pos = Pp + Gp @ SKEL.rest_offsets[j] * scale[j - 1]
                cache[j] = (Gp @ _oracle_rot(state.theta[j]), pos)
        return cache[j]

    return np.array([visit(j)[1] for j in reversed(range(NUM_JOINTS))])[::-1]


# ---------------------------------------------------------------- rotations

def test_rot6d_identity():
    np.testing.assert_allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))


def test_rot6d_quarter_turn_about_z():
    np.testing.assert_allclose(rot6d_to_matrix([0, 1, 0, -1, 0, 0]),
                               [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_rot6d_scale_invariant():
    np.testing.assert_allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3))


@pytest.mark.parametrize("r", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0]])
def test_rot6d_degenerate(r):
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix(r)


@given(seed=seeds)
def test_rot6d_round_trip(seed):
    R = Rotation.random(random_state=seed).as_matrix()
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(R)), R, atol=1e-12)


@given(seed=seeds)
def test_rot6d_output_is_rotation(seed):
    r = np.random.default_rng(seed).normal(size=6)
    R = rot6d_to_matrix(r)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_axis_angle_round_trip(rng):
    aa = rng.normal(0, 0.8, NUM_JOINTS * 3)
    np.testing.assert_allclose(theta_to_axis_angle(axis_angle_to_theta(aa)), aa, atol=1e-10)


# ---------------------------------------------------------------- skeleton

def test_skeleton_is_tree_rooted_at_pelvis():
    assert SKEL.parents[0] == -1
    for j in range(1, NUM_JOINTS):
        assert 0 <= SKEL.parents[j] < j


def test_keypoint_map_rows_sum_to_one():
    np.testing.assert_allclose(SKEL.keypoint_map.sum(axis=1), 1.0)


@given(beta=st.lists(st.floats(-5, 5), min_size=NUM_BETAS, max_size=NUM_BETAS))
def test_bone_lengths_positive(beta):
    assert (SKEL.bone_scales(np.array(beta)) > 0).all()


# ---------------------------------------------------------------- forward kinematics

def test_rest_pose_is_cumulative_offsets():
    joints, surface = forward_kinematics(SKEL, BodyState.rest())
    expected = np.zeros((NUM_JOINTS, 3))
    for j in range(1, NUM_JOINTS):
        expected[j] = expected[SKEL.parents[j]] + SKEL.rest_offsets[j]
    np.testing.assert_allclose(joints, expected, atol=1e-15)
    assert surface.shape == (88, 3)


def test_translation_shifts_everything():
    j0, s0 = forward_kinematics(SKEL, BodyState.rest())
    j1, s1 = forward_kinematics(SKEL, BodyState.rest(tau=[1, 2, 3]))
    np.testing.assert_allclose(j1 - j0, np.tile([1, 2, 3], (NUM_JOINTS, 1)), atol=1e-15)
    np.testing.assert_allclose(s1 - s0, np.tile([1, 2, 3], (88, 1)), atol=1e-15)


@given(seed=seeds)
def test_fk_matches_recursive_oracle(seed):
    state = random_state(np.random.default_rng(seed))
    joints, _ = forward_kinematics(SKEL, state)
    np.testing.assert_allclose(joints, oracle_fk(state), atol=1e-9)


def test_fk_batches_match_single(rng):
    batch = random_state(rng, (2, 3))
    joints, surface = forward_kinematics(SKEL, batch)
    one = BodyState(batch.theta[1, 2], batch.beta[1, 2], batch.omega[1, 2], batch.tau[1, 2])
    j1, s1 = forward_kinematics(SKEL, one)
    np.testing.assert_allclose(joints[1, 2], j1)
    np.testing.assert_allclose(surface[1, 2], s1)


@given(seed=seeds)
def test_fk_root_equivariance(seed):
    rng = np.random.default_rng(seed)
    state = random_state(rng)
    R = Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()
    t = rng.normal(size=3)
    base = BodyState(state.theta, state.beta, matrix_to_rot6d(np.eye(3)), np.zeros(3))
    moved = BodyState(state.theta, state.beta, matrix_to_rot6d(R), t)
    j0, s0 = forward_kinematics(SKEL, base)
    j1, s1 = forward_kinematics(SKEL, moved)
    np.testing.assert_allclose(j1, j0 @ R.T + t, atol=1e-9)
    np.testing.assert_allclose(s1, s0 @ R.T + t, atol=1e-9)


def test_transform_states_moves_joints_rigidly(rng):
    from raylift.geometry import SE3
    state = random_state(rng, (4,))
    T = SE3(Rotation.random(random_state=7).as_matrix(), [1, -2, 0.5])
    j0, _ = forward_kinematics(SKEL, state)
    j1, _ = forward_kinematics(SKEL, transform_states(state, T))
    np.testing.assert_allclose(j1, T.apply(j0), atol=1e-12)


def test_height_grows_with_first_shape_coefficient():
    heights = []
    for b0 in np.linspace(-5, 5, 11):
        beta = np.zeros(NUM_BETAS)
        beta[0] = b0
        joints, _ = forward_kinematics(SKEL, BodyState.rest(beta=beta))
        heights.append(np.ptp(joints[:, 2]))
    assert np.all(np.diff(heights) > 0)


# ---------------------------------------------------------------- keypoints

def test_keypoints_direct_and_interpolated():
    joints, _ = forward_kinematics(SKEL, BodyState.rest())
    kp = observed_keypoints(SKEL, joints)
    np.testing.assert_allclose(kp[COCO_NAMES.index("left_shoulder")], joints[J["left_shoulder"]])
    np.testing.assert_allclose(kp[COCO_NAMES.index("nose")], joints[J["head"]])
    eye = 0.65 * joints[J["head"]] + 0.35 * joints[J["left_ear"]]
    np.testing.assert_allclose(kp[COCO_NAMES.index("left_eye")], eye)


def test_rest_keypoints_match_map_product():
    joints, _ = forward_kinematics(SKEL, BodyState.rest())
    expected = np.array([sum(SKEL.keypoint_map[k, j] * joints[j] for j in range(NUM_JOINTS))
                         for k in range(17)])
    np.testing.assert_allclose(observed_keypoints(SKEL, joints), expected, atol=1e-15)


def test_keypoint_row_midpoint():
    M = np.zeros((17, NUM_JOINTS))
    M[:, 5] = 1.0
    M[0] = 0.0
    M[0, 1] = M[0, 2] = 0.5
    from dataclasses import replace
    skel = replace(SKEL, keypoint_map=M)
    joints = np.random.default_rng(0).normal(size=(NUM_JOINTS, 3))
    kp = observed_keypoints(skel, joints)
    np.testing.assert_allclose(kp[0], (joints[1] + joints[2]) / 2)
    np.testing.assert_allclose(kp[3], joints[5])


# ---------------------------------------------------------------- velocity

def _clip(tau, rate=30.0):
    n = len(tau)
    rest = BodyState.rest()
    return MotionClip(np.tile(rest.theta, (n, 1, 1)), np.zeros((n, NUM_BETAS)),
                      np.tile(rest.omega, (n, 1)), np.asarray(tau, float), rate)


def test_velocity_static_clip():
    assert not joint_velocity(_clip(np.zeros((5, 3)))).any()


def test_velocity_constant_translation():
    t = np.arange(10) / 30.0
    v = joint_velocity(_clip(np.column_stack([t, 0 * t, 0 * t])))
    assert v.shape == (9, NUM_JOINTS, 3)
    np.testing.assert_allclose(v, np.broadcast_to([1, 0, 0], v.shape), atol=1e-12)


def test_velocity_sinusoid_within_first_order():
    rate = 120.0
    t = np.arange(240) / rate
    v = joint_velocity(_clip(np.column_stack([np.sin(t), 0 * t, 0 * t]), rate))
    mid = t[:-1] + 0.5 / rate
    # forward difference equals the derivative at the interval midpoint up to O(dt^2)
    np.testing.assert_allclose(v[:, 0, 0], np.cos(mid), atol=1.0 / rate ** 2)
    np.testing.assert_allclose(v[:, 0, 0], np.cos(t[:-1]), atol=1.0 / rate)


def test_velocity_rejects_short_clip():
    with pytest.raises(ValueError):
        _clip(np.zeros((1, 3)))
