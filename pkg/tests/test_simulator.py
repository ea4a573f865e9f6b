import numpy as np
import pytest

from raylift.body_model import (DEFAULT_SKELETON as SKEL, FEET_KEYPOINTS, BodyState,
                                MotionClip, forward_kinematics, observed_keypoints)
from raylift.config import MaskConfig, NoiseConfig, PoseNoiseConfig, SimConfig
from raylift.geometry import SE3, project, so3_log
from raylift.simulator import (DEFAULT_CAMERA, SIDE_YAW, Detections, apply_keypoint_noise,
                               apply_masking, apply_pose_noise, correlated_noise,
                               keypoint_sigmas, pose_noise_offsets, render_detections,
                               rig_extrinsics, simulate_scene, synthesize_motion,
                               synthesize_rig, synthesize_wearer)


def cfg(**kw):
    base = dict(seed=3, num_people=2, duration_s=4.0)
    base.update(kw)
    return SimConfig(**base)


def static_clip(tau, n=10, yaw=0.0):
    rest = BodyState.rest()
    c, s = np.cos(yaw), np.sin(yaw)
    omega = np.array([c, s, 0, -s, c, 0])
    return MotionClip(np.tile(rest.theta, (n, 1, 1)), np.zeros((n, 10)), np.tile(omega, (n, 1)),
                      np.tile(np.asarray(tau, float), (n, 1)))


def fixed_rig(layout, n=10, R=None):
    from raylift.geometry import CameraRig
    extr = rig_extrinsics(layout)
    poses = np.tile(np.eye(4), (n, 1, 1))
    if R is not None:
        poses[:, :3, :3] = R
    return CameraRig((DEFAULT_CAMERA,) * len(extr), extr, poses)


# device axes x right, y down, z forward; looking along world +x
LOOK_X = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


# ---------------------------------------------------------------- motion

def test_no_people():
    assert synthesize_motion(cfg(num_people=0)) == []


def test_motion_deterministic():
    a, b = synthesize_motion(cfg()), synthesize_motion(cfg())
    for x, y in zip(a, b):
        for name in ("theta", "beta", "omega", "tau"):
            assert np.array_equal(getattr(x, name), getattr(y, name))


def test_motion_speed_bound():
    c = cfg(num_people=4, duration_s=20.0)
    for clip in synthesize_motion(c):
        step = np.linalg.norm(np.diff(clip.tau, axis=0), axis=1)
        assert step.max() <= 2.0 / c.rate_hz


def test_motion_states_are_valid():
    from raylift.body_model import rot6d_to_matrix
    clip = synthesize_motion(cfg(num_people=1))[0]
    R = rot6d_to_matrix(clip.theta)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-9)
    assert np.abs(clip.beta).max() <= 5


# ---------------------------------------------------------------- rigs

def test_layout_camera_counts():
    assert len(rig_extrinsics("mono")) == 1
    assert len(rig_extrinsics("stereo")) == 2
    assert len(rig_extrinsics("quad_270")) == 4


def test_stereo_baseline():
    a, b = rig_extrinsics("stereo")
    assert np.linalg.norm(a.translation - b.translation) == pytest.approx(0.1, abs=1e-15)


def test_side_cameras_at_100_degrees():
    extr = rig_extrinsics("quad_270")
    yaws = []
    for e in extr[2:]:
        z = e.rotation[:, 2]               # optical axis in device axes (x right, z forward)
        yaws.append(np.degrees(np.arctan2(z[0], z[2])))
    assert sorted(yaws) == pytest.approx([-100.0, 100.0])
    assert np.degrees(SIDE_YAW) == pytest.approx(100.0)


def test_rig_follows_wearer_head():
    c = cfg(rig_layout="mono")
    wearer = synthesize_wearer(c)
    rig = synthesize_rig(c, wearer)
    joints, _ = forward_kinematics(SKEL, wearer.states())
    from raylift.body_model import J
    np.testing.assert_allclose(rig.device_poses[:, :3, 3], joints[:, J["head"]])
    assert rig.num_cameras == 1 and rig.num_frames == c.num_frames


# ---------------------------------------------------------------- rendering

def test_person_behind_every_camera_is_invisible():
    rig = fixed_rig("mono", R=LOOK_X)
    dets = render_detections(rig, [static_clip([-3.0, 0, 0])])
    assert not dets.present.any()


def test_rendering_matches_projection_oracle():
    rig = fixed_rig("quad_270", R=LOOK_X)
    clip = static_clip([2.0, 0.3, -0.6], yaw=0.4)
    dets = render_detections(rig, [clip])
    joints, _ = forward_kinematics(SKEL, clip.state(0))
    kps = observed_keypoints(SKEL, joints)
    for k in range(4):
        uv, vis = project(DEFAULT_CAMERA, rig.camera_pose(0, k), kps)
        got = dets.keypoints[0, k, 0]
        np.testing.assert_array_equal(got[:, 2] > 0, vis)
        np.testing.assert_allclose(got[vis, :2], uv[vis], atol=1e-9)


def test_box_is_dilated_hull():
    rig = fixed_rig("mono", R=LOOK_X)
    dets = render_detections(rig, [static_clip([3.0, 0, -0.5])])
    kp = dets.keypoints[0, 0, 0]
    lo, hi = kp[:, :2].min(0), kp[:, :2].max(0)
    box = dets.boxes[0, 0, 0]
    np.testing.assert_allclose(box[2:] - box[:2], (hi - lo) * 1.1)
    np.testing.assert_allclose((box[2:] + box[:2]) / 2, (hi + lo) / 2)


def test_more_cameras_see_more():
    mono = simulate_scene(cfg(rig_layout="mono", num_people=3, duration_s=10.0))
    quad = simulate_scene(cfg(rig_layout="quad_270", num_people=3, duration_s=10.0))
    vis_m = (mono.detections.keypoints[..., 2] > 0).sum()
    vis_q = (quad.detections.keypoints[..., 2] > 0).sum()
    assert vis_q >= vis_m
    # the people and wearer are the same in both scenes
    np.testing.assert_array_equal(mono.people[0].tau, quad.people[0].tau)


def test_scene_deterministic():
    a = simulate_scene(cfg(apply_noise=True, apply_masking=True))
    b = simulate_scene(cfg(apply_noise=True, apply_masking=True))
    assert np.array_equal(a.detections.keypoints, b.detections.keypoints)
    assert np.array_equal(a.rig.device_poses, b.rig.device_poses)


# ---------------------------------------------------------------- keypoint noise

def full_detections(T=60, K=2, P=1):
    kp = np.zeros((T, K, P, 17, 3))
    kp[..., 0] = 300.0
    kp[..., 1] = 200.0
    kp[..., 2] = 1.0
    boxes = np.tile([250.0, 150, 350, 250], (T, K, P, 1))
    return Detections(kp, boxes, tuple(range(P)))


def test_zero_noise_is_identity():
    d = full_detections()
    out = apply_keypoint_noise(d, NoiseConfig(correlated_sigma_px=0, perframe_sigma_px=0), 1)
    assert np.array_equal(out.keypoints, d.keypoints)


def test_noise_confidence_decay():
    d = full_detections()
    out = apply_keypoint_noise(d, NoiseConfig(), 1)
    offset = np.linalg.norm(out.keypoints[..., :2] - d.keypoints[..., :2], axis=-1)
    np.testing.assert_allclose(out.keypoints[..., 2], np.exp(-offset / 10.0), rtol=1e-12)


def test_correlated_noise_halflife():
    h = 8
    x = correlated_noise(np.random.default_rng(0), 10_000, (), 1.0, h)
    x = x - x.mean()
    rho = (x[h:] * x[:-h]).mean() / (x * x).mean()
    assert rho == pytest.approx(0.5, abs=0.1)


def test_distal_multiplier():
    corr, white = keypoint_sigmas(NoiseConfig())
    ankle, shoulder = 15, 5
    assert corr[ankle] / corr[shoulder] == pytest.approx(1.5)
    assert white[ankle] / white[shoulder] == pytest.approx(1.5)


# ---------------------------------------------------------------- masking

def test_clean_clip_masking_is_identity():
    d = full_detections()
    out = apply_masking(d, MaskConfig(clean_clip_prob=1.0), 0)
    assert np.array_equal(out.keypoints, d.keypoints)


def test_all_probabilities_zero_without_bursts_is_identity():
    d = full_detections()
    m = MaskConfig(force_mono_prob=0, feet_bias=0, clean_clip_prob=0, view_dropout=False,
                   bursts_per_view=(0, 0))
    assert np.array_equal(apply_masking(d, m, 0).keypoints, d.keypoints)


@pytest.mark.parametrize("seed", range(5))
def test_force_mono_keeps_one_view(seed):
    d = full_detections(K=4)
    out = apply_masking(d, MaskConfig(force_mono_prob=1.0, clean_clip_prob=0.0), seed)
    views = out.present[:, :, 0].any(axis=0)
    assert views.sum() == 1


def _runs(mask):
    padded = np.concatenate([[0], mask.astype(int), [0]])
    edges = np.diff(padded)
    return np.nonzero(edges == -1)[0] - np.nonzero(edges == 1)[0]


@pytest.mark.parametrize("seed", range(10))
def test_burst_lengths(seed):
    d = full_detections(T=120, K=2)
    m = MaskConfig(force_mono_prob=0, clean_clip_prob=0, view_dropout=False,
                   bursts_per_view=(2, 4), feet_bias=1.0)
    out = apply_masking(d, m, seed)
    masked = out.keypoints[..., 2] == 0
    runs = np.concatenate([_runs(masked[:, k, 0, j]) for k in range(2) for j in range(17)])
    assert runs.size and runs.min() >= 10 and runs.max() <= 20


@pytest.mark.parametrize("seed", range(5))
def test_masking_never_leaves_partial_cells(seed):
    scene = simulate_scene(cfg(seed=seed, apply_noise=True, apply_masking=True))
    kp = scene.detections.keypoints
    off = kp[..., 2] == 0
    assert not kp[off][:, :2].any()


def test_feet_bias_masks_feet():
    d = full_detections(T=200, K=1)
    m = MaskConfig(force_mono_prob=0, clean_clip_prob=0, view_dropout=False,
                   bursts_per_view=(0, 0), feet_bias=1.0)
    masked = apply_masking(d, m, 2).keypoints[:, 0, 0, :, 2] == 0
    assert masked[:, list(FEET_KEYPOINTS)].any()
    others = [j for j in range(17) if j not in FEET_KEYPOINTS]
    assert not masked[:, others].any()


# ---------------------------------------------------------------- pose noise

def test_zero_pose_noise_is_identity():
    rig = fixed_rig("mono", R=LOOK_X)
    assert apply_pose_noise(rig, PoseNoiseConfig(), 0) is rig


def test_pose_noise_rms():
    c = PoseNoiseConfig(trans_sigma_m=0.02, rot_sigma_deg=0.02)
    rms = []
    for seed in range(20):
        _, t = pose_noise_offsets(30 * 600, 30.0, c, seed)
        rms.append(np.sqrt((t ** 2).sum(axis=1).mean()))
    assert np.mean(rms) == pytest.approx(0.02, rel=0.3)


def test_pose_noise_is_continuous():
    c = PoseNoiseConfig(trans_sigma_m=0.08, rot_sigma_deg=0.2, resample_interval_s=10.0)
    rate = 30.0
    R, t = pose_noise_offsets(int(rate * 120), rate, c, 11)
    bound = 2 * c.trans_sigma_m / (c.resample_interval_s * rate) * 2.5
    assert np.linalg.norm(np.diff(t, axis=0), axis=1).max() <= bound
    dang = [np.linalg.norm(so3_log(a.T @ b)) for a, b in zip(R[:-1], R[1:])]
    assert max(dang) <= 2 * np.radians(c.rot_sigma_deg) / (c.resample_interval_s * rate) * 2.5


def test_pose_noise_moves_rig():
    rig = fixed_rig("mono", n=40, R=LOOK_X)
    noisy = apply_pose_noise(rig, PoseNoiseConfig(trans_sigma_m=0.05), 0)
    assert not np.allclose(noisy.device_poses, rig.device_poses)
    assert all(SE3.from_matrix(M).is_valid() for M in noisy.device_poses)
