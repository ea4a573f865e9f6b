"""Synthetic multi-person motion, head-mounted rigs and 2D keypoint rendering.

Every function is a pure function of its inputs and seed; random streams are
split per person / camera with ``numpy.random.default_rng([seed, ...])`` so
results do not depend on call order.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .body_model import (BodyState, DEFAULT_SKELETON, DISTAL_KEYPOINTS, FEET_KEYPOINTS,
                         IDENTITY_6D, J, MotionClip, NUM_BETAS, NUM_JOINTS, Skeleton,
                         forward_kinematics, matrix_to_rot6d, observed_keypoints,
                         transform_states)
from .config import MaskConfig, NoiseConfig, PoseNoiseConfig, SimConfig
from .geometry import (SE3, CameraModel, CameraRig, NEAR_PLANE, hull_box, lift_dense,
                       rot_x, rot_y, rot_z, so3_exp, so3_log)

MAX_SPEED = 2.0
_WALK_SPEED_CAP = 1.8          # horizontal cap; leaves room for the gait bob
_MAX_TURN = np.radians(120.0)  # rad/s
_ACCEL = 1.5                   # m/s^2
HEAD_YAW_AMP = np.radians(40.0)
HEAD_YAW_HZ = 0.3
HEAD_PITCH_AMP = np.radians(15.0)
HEAD_PITCH_HZ = 0.5
STEREO_BASELINE = 0.1
SIDE_YAW = np.radians(100.0)
CONF_DECAY_PX = 10.0

DEFAULT_CAMERA = CameraModel(fx=230.0, fy=230.0, cx=320.0, cy=240.0, width=640, height=480)


# ---------------------------------------------------------------- motion

def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _smooth_signal(rng, n, dt, amp, freq=(0.05, 0.4)):
    """Sum of three random sinusoids, peak amplitude ``amp``."""
    t = np.arange(n) * dt
    f = rng.uniform(*freq, size=3)
    ph = rng.uniform(0, 2 * np.pi, size=3)
    w = rng.uniform(0.3, 1.0, size=3)
    s = (w[:, None] * np.sin(2 * np.pi * f[:, None] * t + ph[:, None])).sum(0)
    return amp * s / w.sum()


def _walk(rng, n, dt, start, sample_waypoint, speed_range, pause_prob=0.3):
    """Steer towards random waypoints with bounded speed, acceleration and turn rate."""
    pos = np.array(start, dtype=float)
    heading = rng.uniform(-np.pi, np.pi)
    speed = 0.0
    target = sample_waypoint(rng, pos)
    target_speed = rng.uniform(*speed_range)
    pause = 0
    out_pos = np.empty((n, 2))
    out_head = np.empty(n)
    out_speed = np.empty(n)
    for i in range(n):
        to = target - pos
        dist = np.linalg.norm(to)
        if dist < 0.3:
            target = sample_waypoint(rng, pos)
            target_speed = rng.uniform(*speed_range)
            if rng.random() < pause_prob:
                pause = int(rng.uniform(0.5, 2.0) / dt)
            to = target - pos
        dh = _wrap(np.arctan2(to[1], to[0]) - heading)
        heading = _wrap(heading + np.clip(dh, -_MAX_TURN * dt, _MAX_TURN * dt))
        if pause > 0:
            desired = 0.0
            pause -= 1
        else:
            desired = target_speed * max(0.0, np.cos(dh))
        speed += np.clip(desired - speed, -_ACCEL * dt, _ACCEL * dt)
        speed = float(np.clip(speed, 0.0, _WALK_SPEED_CAP))
        pos = pos + speed * dt * np.array([np.cos(heading), np.sin(heading)])
        out_pos[i], out_head[i], out_speed[i] = pos, heading, speed
    return out_pos, out_head, out_speed


def _annulus_sampler(center, r_min, r_max, max_step_angle=np.radians(60.0)):
    center = np.asarray(center, dtype=float)

    def sample(rng, pos):
        ang0 = np.arctan2(pos[1] - center[1], pos[0] - center[0])
        ang = ang0 + rng.uniform(-max_step_angle, max_step_angle)
        r = rng.uniform(r_min, r_max)
        return center + r * np.array([np.cos(ang), np.sin(ang)])
    return sample


def _disc_sampler(center, radius):
    center = np.asarray(center, dtype=float)

    def sample(rng, pos):
        r = radius * np.sqrt(rng.random())
        a = rng.uniform(-np.pi, np.pi)
        return center + r * np.array([np.cos(a), np.sin(a)])
    return sample


def _animate(rng, xy, heading, speed, dt, beta, skel: Skeleton, gesture_amp=1.0):
    """Procedural gait phase-locked to speed plus slow idle variation."""
    n = len(xy)
    freq = 0.5 + 0.35 * speed
    phase = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.cumsum(freq) * dt
    a = np.clip(speed / 1.4, 0.0, 1.2)
    s = np.sin(phase)
    R = np.tile(np.eye(3), (n, NUM_JOINTS, 1, 1))

    def setj(name, M):
        R[:, J[name]] = M

    def stack(fn, angles):
        return fn(angles)

    g = gesture_amp
    raise_l = np.maximum(0.0, _smooth_signal(rng, n, dt, 1.6 * g) - 0.4)
    raise_r = np.maximum(0.0, _smooth_signal(rng, n, dt, 1.6 * g) - 0.4)
    abd_l = 0.1 + np.abs(_smooth_signal(rng, n, dt, 0.4 * g))
    abd_r = 0.1 + np.abs(_smooth_signal(rng, n, dt, 0.4 * g))
    setj("left_hip", stack(rot_x, 0.45 * a * s))
    setj("right_hip", stack(rot_x, -0.45 * a * s))
    setj("left_knee", stack(rot_x, -(0.05 + 0.6 * a * np.maximum(0, np.sin(phase + np.pi / 3)))))
    setj("right_knee", stack(rot_x, -(0.05 + 0.6 * a * np.maximum(0, np.sin(phase + np.pi + np.pi / 3)))))
    setj("left_ankle", stack(rot_x, 0.2 * a * np.sin(phase - np.pi / 2)))
    setj("right_ankle", stack(rot_x, 0.2 * a * np.sin(phase + np.pi / 2)))
    lean = _smooth_signal(rng, n, dt, 0.15 * g) - 0.05 * a
    setj("spine1", stack(rot_z, -0.08 * a * s) @ stack(rot_x, lean))
    setj("spine2", stack(rot_z, _smooth_signal(rng, n, dt, 0.25 * g)))
    setj("neck", stack(rot_z, _smooth_signal(rng, n, dt, 0.6 * g))
         @ stack(rot_x, _smooth_signal(rng, n, dt, 0.3 * g)))
    setj("left_shoulder", stack(rot_x, -0.35 * a * s + raise_l) @ stack(rot_y, abd_l))
    setj("right_shoulder", stack(rot_x, 0.35 * a * s + raise_r) @ stack(rot_y, -abd_r))
    elbow_l = 0.25 + 0.25 * a + np.abs(_smooth_signal(rng, n, dt, 0.9 * g))
    elbow_r = 0.25 + 0.25 * a + np.abs(_smooth_signal(rng, n, dt, 0.9 * g))
    setj("left_elbow", stack(rot_x, elbow_l))
    setj("right_elbow", stack(rot_x, elbow_r))

    psi = heading - np.pi / 2
    root = stack(rot_z, psi + 0.1 * a * s)
    h0 = skel.ground_offset(beta)
    z = h0 * np.cos(0.45 * a * s) * 0.995 + 0.012 * a * np.cos(2 * phase)
    tau = np.column_stack([xy, z])
    theta = matrix_to_rot6d(R)
    return theta, matrix_to_rot6d(root), tau


def _person_clip(rng, n, dt, start, sampler, speed_range, person_id, skel,
                 rate_hz, pause_prob=0.3, gesture_amp=1.0, beta=None):
    if beta is None:
        beta = np.clip(rng.normal(0, 1.0, NUM_BETAS), -2.5, 2.5)
    xy, heading, speed = _walk(rng, n, dt, start, sampler, speed_range, pause_prob)
    theta, omega, tau = _animate(rng, xy, heading, speed, dt, beta, skel, gesture_amp)
    return MotionClip(theta, np.tile(beta, (n, 1)), omega, tau, rate_hz, person_id)


def synthesize_motion(cfg: SimConfig, skel: Skeleton = DEFAULT_SKELETON) -> list:
    """Observed people walking around the wearer's area (origin)."""
    n, dt = cfg.num_frames, 1.0 / cfg.rate_hz
    clips = []
    for i in range(cfg.num_people):
        rng = np.random.default_rng([cfg.seed, 1, i])
        ang = rng.uniform(-np.pi, np.pi)
        r = rng.uniform(cfg.min_distance_m + 0.5, cfg.max_distance_m)
        start = r * np.array([np.cos(ang), np.sin(ang)])
        sampler = _annulus_sampler((0, 0), cfg.min_distance_m + 0.5, cfg.max_distance_m)
        clips.append(_person_clip(rng, n, dt, start, sampler, (0.3, 1.6), i, skel, cfg.rate_hz))
    return clips


def synthesize_wearer(cfg: SimConfig, skel: Skeleton = DEFAULT_SKELETON) -> MotionClip:
    """The headset wearer, wandering slowly near the origin."""
    rng = np.random.default_rng([cfg.seed, 0])
    n, dt = cfg.num_frames, 1.0 / cfg.rate_hz
    return _person_clip(rng, n, dt, (0.0, 0.0), _disc_sampler((0, 0), 1.0),
                        (0.0, cfg.wearer_speed_max), -1, skel, cfg.rate_hz,
                        pause_prob=0.5, gesture_amp=0.0, beta=np.zeros(NUM_BETAS))


# ---------------------------------------------------------------- rigs

def rig_extrinsics(layout: str):
    """``T_body_cam`` per camera. Device body axes: x right, y down, z forward."""
    if layout == "mono":
        return (SE3(),)
    half = STEREO_BASELINE / 2
    stereo = (SE3(np.eye(3), [-half, 0, 0]), SE3(np.eye(3), [half, 0, 0]))
    if layout == "stereo":
        return stereo
    if layout == "quad_270":
        return stereo + (SE3(rot_y(-SIDE_YAW), [-0.07, 0.0, -0.03]),
                         SE3(rot_y(SIDE_YAW), [0.07, 0.0, -0.03]))
    raise ValueError(f"unknown rig layout {layout!r}")


def device_orientation(yaw, pitch) -> np.ndarray:
    """World-from-device rotation(s) for heading ``yaw`` (from +x) and upward pitch."""
    yaw, pitch = np.broadcast_arrays(np.asarray(yaw, float), np.asarray(pitch, float))
    f = np.stack([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)], -1)
    right = np.stack([np.sin(yaw), -np.cos(yaw), np.zeros_like(yaw)], -1)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=-1)


def synthesize_rig(cfg: SimConfig, wearer: MotionClip,
                   skel: Skeleton = DEFAULT_SKELETON, head_motion: bool = True) -> CameraRig:
    """Rig following the wearer's head, optionally with oscillating yaw and pitch."""
    rng = np.random.default_rng([cfg.seed, 2])
    extr = rig_extrinsics(cfg.rig_layout)
    joints, _ = forward_kinematics(skel, wearer.states())
    head = joints[:, J["head"]]
    fx, fy = rot_z_cols(wearer.omega)
    facing = np.arctan2(fy, fx)
    t = np.arange(len(wearer)) / cfg.rate_hz
    gain = 1.0 if head_motion else 0.0
    yaw = facing + gain * HEAD_YAW_AMP * np.sin(2 * np.pi * HEAD_YAW_HZ * t
                                                + rng.uniform(0, 2 * np.pi))
    pitch = gain * HEAD_PITCH_AMP * np.sin(2 * np.pi * HEAD_PITCH_HZ * t
                                           + rng.uniform(0, 2 * np.pi))
    poses = np.tile(np.eye(4), (len(wearer), 1, 1))
    poses[:, :3, :3] = device_orientation(yaw, pitch)
    poses[:, :3, 3] = head
    cams = tuple(DEFAULT_CAMERA for _ in extr)
    return CameraRig(cams, extr, poses, cfg.rate_hz)


def rot_z_cols(omega6d):
    """Horizontal facing direction (x, y) of a body: its rotated +y axis."""
    y_axis = omega6d[..., 3:6]
    return y_axis[..., 0], y_axis[..., 1]


# ---------------------------------------------------------------- detections

@dataclass
class Detections:
    """Dense per-(frame, camera, person) keypoints and boxes.

    ``keypoints[t, k, p]`` is (17, 3) of ``[u, v, confidence]``; a detection is
    present when any keypoint has positive confidence.
    """
    keypoints: np.ndarray   # (T, K, P, 17, 3)
    boxes: np.ndarray       # (T, K, P, 4)
    person_ids: tuple
    rate_hz: float = 30.0

    @property
    def present(self) -> np.ndarray:
        return (self.keypoints[..., 2] > 0).any(axis=-1)

    @property
    def num_frames(self) -> int:
        return self.keypoints.shape[0]

    def copy(self) -> "Detections":
        return Detections(self.keypoints.copy(), self.boxes.copy(), self.person_ids, self.rate_hz)

    def frame(self, t: int) -> list:
        """Tracker-style list of ``(camera, keypoints, box, person_id)`` at frame t."""
        out = []
        present = self.present[t]
        for k, p in zip(*np.nonzero(present)):
            out.append((int(k), self.keypoints[t, k, p], self.boxes[t, k, p],
                        self.person_ids[p]))
        return out

    def person(self, p: int) -> np.ndarray:
        """(T, K, 17, 3) keypoints of one person."""
        return self.keypoints[:, :, p]


def render_detections(rig: CameraRig, clips: list, cfg: SimConfig | None = None,
                      skel: Skeleton = DEFAULT_SKELETON, dilation: float = 0.1) -> Detections:
    T = rig.num_frames
    K = rig.num_cameras
    P = len(clips)
    kp = np.zeros((T, K, P, 17, 3))
    boxes = np.zeros((T, K, P, 4))
    for p, clip in enumerate(clips):
        joints, _ = forward_kinematics(skel, clip.states())
        pts = observed_keypoints(skel, joints)                       # (n, 17, 3)
        frames = clip.start + np.arange(len(clip))
        ok = (frames >= 0) & (frames < T)
        frames, pts = frames[ok], pts[ok]
        for k in range(K):
            R, c = rig.camera_poses_array(frames, k)
            pc = np.einsum("fba,fjb->fja", R, pts - c[:, None, :])  # R^T (p - c)
            cam = rig.cameras[k]
            z = pc[..., 2]
            front = z > NEAR_PLANE
            zs = np.where(front, z, 1.0)
            u = cam.fx * pc[..., 0] / zs + cam.cx
            v = cam.fy * pc[..., 1] / zs + cam.cy
            vis = front & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
            uv = np.stack([u, v], -1)
            kp[frames, k, p, :, :2] = np.where(vis[..., None], uv, 0.0)
            kp[frames, k, p, :, 2] = vis.astype(float)
            for i in np.nonzero(vis.any(axis=1))[0]:
                boxes[frames[i], k, p] = hull_box(uv[i][vis[i]], dilation)
    ids = tuple(c.person_id for c in clips)
    rate = rig.rate_hz if cfg is None else cfg.rate_hz
    return Detections(kp, boxes, ids, rate)


def keypoint_sigmas(cfg: NoiseConfig):
    """Per-keypoint (correlated, per-frame) noise standard deviations in pixels."""
    mult = np.ones(17)
    mult[list(DISTAL_KEYPOINTS)] = cfg.distal_multiplier
    return cfg.correlated_sigma_px * mult, cfg.perframe_sigma_px * mult


def correlated_noise(rng, n, shape, sigma, halflife):
    """Stationary AR(1) noise whose autocorrelation halves every ``halflife`` frames."""
    a = 0.5 ** (1.0 / halflife)
    b = np.sqrt(1 - a * a)
    out = np.empty((n,) + tuple(shape))
    x = rng.standard_normal(shape)
    out[0] = x
    eps = rng.standard_normal((n,) + tuple(shape))
    for t in range(1, n):
        x = a * x + b * eps[t]
        out[t] = x
    return out * sigma


def apply_keypoint_noise(dets: Detections, cfg: NoiseConfig, seed: int,
                         cameras=None) -> Detections:
    """Correlated plus white pixel jitter; confidence decays with offset size.

    Keypoints pushed outside the image are dropped (coordinates and
    confidence zeroed together).
    """
    out = dets.copy()
    sig_c, sig_w = keypoint_sigmas(cfg)
    if not (sig_c.any() or sig_w.any()):
        return out
    T, K, P = dets.keypoints.shape[:3]
    for p in range(P):
        pid = dets.person_ids[p]
        for k in range(K):
            rng = np.random.default_rng([seed, 3, pid + 1000, k])
            off = correlated_noise(rng, T, (17, 2), 1.0, cfg.correlation_halflife_frames)
            off *= sig_c[:, None]
            off += rng.standard_normal((T, 17, 2)) * sig_w[:, None]
            block = out.keypoints[:, k, p]
            vis = block[..., 2] > 0
            block[..., :2] += np.where(vis[..., None], off, 0.0)
            block[..., 2] *= np.exp(-np.linalg.norm(off, axis=-1) / CONF_DECAY_PX)
            if cameras is not None:
                cam = cameras[k]
                inside = ((block[..., 0] >= 0) & (block[..., 0] <= cam.width)
                          & (block[..., 1] >= 0) & (block[..., 1] <= cam.height))
                block[~inside] = 0.0
            block[~vis] = 0.0
    return out


def _place_bursts(rng, T, lo, hi, busy, joints):
    """Mask one burst on ``joints``; skip joints whose runs would touch an existing burst."""
    L = int(rng.integers(lo, hi + 1))
    if T < L:
        return
    s = int(rng.integers(0, T - L + 1))
    a, b = max(0, s - 1), min(T, s + L + 1)
    for j in joints:
        if not busy[a:b, j].any():
            busy[s:s + L, j] = True


def apply_masking(dets: Detections, cfg: MaskConfig, seed: int) -> Detections:
    """View dropout spans, forced-mono snippets and joint occlusion bursts."""
    out = dets.copy()
    T, K, P = dets.keypoints.shape[:3]
    for p in range(P):
        rng = np.random.default_rng([seed, 4, dets.person_ids[p] + 1000])
        if rng.random() < cfg.clean_clip_prob:
            continue
        kp = out.keypoints[:, :, p]
        view_mask = np.zeros((T, K), dtype=bool)
        if rng.random() < cfg.force_mono_prob:
            seen = np.nonzero(dets.present[:, :, p].any(axis=0))[0]
            keep = int(rng.choice(seen)) if seen.size else 0
            view_mask[:, [k for k in range(K) if k != keep]] = True
        elif cfg.view_dropout and K > 1:
            t = 0
            weights = np.arange(1, K + 1, dtype=float)
            while t < T:
                L = int(rng.integers(cfg.span_frames[0], cfg.span_frames[1] + 1))
                n_active = int(rng.choice(np.arange(1, K + 1), p=weights / weights.sum()))
                active = rng.choice(K, size=n_active, replace=False)
                off = np.setdiff1d(np.arange(K), active)
                view_mask[t:t + L, off] = True
                t += L
        for k in range(K):
            busy = np.zeros((T, 17), dtype=bool)
            nb = int(rng.integers(cfg.bursts_per_view[0], cfg.bursts_per_view[1] + 1))
            for _ in range(nb):
                nj = int(rng.integers(cfg.joints_per_burst[0], cfg.joints_per_burst[1] + 1))
                joints = rng.choice(17, size=nj, replace=False)
                _place_bursts(rng, T, *cfg.span_frames, busy, joints)
            if rng.random() < cfg.feet_bias:
                _place_bursts(rng, T, *cfg.span_frames, busy, FEET_KEYPOINTS)
            kp[:, k][busy] = 0.0
        kp[view_mask] = 0.0
    # boxes of fully masked detections are cleared as well
    out.boxes[~out.present] = 0.0
    return out


def _slerp_offsets(Ra, Rb, alpha):
    return Ra @ so3_exp(alpha * so3_log(Ra.T @ Rb))


def pose_noise_offsets(num_frames: int, rate_hz: float, cfg: PoseNoiseConfig, seed: int):
    """Smoothly ramped SE(3) offsets: (N,3,3) rotations and (N,3) translations.

    Knots are drawn every ``resample_interval_s`` and interpolated linearly
    (slerp for rotation). Knot draws are inflated by sqrt(3/2) so the
    time-averaged RMS of the interpolated offset equals the configured sigma.
    """
    rng = np.random.default_rng([seed, 5])
    per = cfg.resample_interval_s * rate_hz
    n_knots = int(np.ceil((num_frames - 1) / per)) + 2
    infl = np.sqrt(1.5)
    kt = rng.standard_normal((n_knots, 3)) * cfg.trans_sigma_m / np.sqrt(3) * infl
    kr = rng.standard_normal((n_knots, 3)) * np.radians(cfg.rot_sigma_deg) / np.sqrt(3) * infl
    kR = [so3_exp(w) for w in kr]
    R = np.empty((num_frames, 3, 3))
    t = np.empty((num_frames, 3))
    for i in range(num_frames):
        x = i / per
        a = int(np.floor(x))
        alpha = x - a
        t[i] = (1 - alpha) * kt[a] + alpha * kt[a + 1]
        R[i] = _slerp_offsets(kR[a], kR[a + 1], alpha)
    return R, t


def apply_pose_noise(rig: CameraRig, cfg: PoseNoiseConfig, seed: int) -> CameraRig:
    """Perturb device poses: rotation about the device centre plus a translation."""
    if cfg.trans_sigma_m == 0 and cfg.rot_sigma_deg == 0:
        return rig
    R, t = pose_noise_offsets(rig.num_frames, rig.rate_hz, cfg, seed)
    poses = rig.device_poses.copy()
    poses[:, :3, :3] = R @ poses[:, :3, :3]
    poses[:, :3, 3] += t
    return rig.with_poses(poses)


# ---------------------------------------------------------------- scenes

@dataclass
class Scene:
    rig: CameraRig
    wearer: MotionClip
    people: list
    detections: Detections


def simulate_scene(cfg: SimConfig, skel: Skeleton = DEFAULT_SKELETON) -> Scene:
    """Full scene: motion, rig, rendered detections and configured augmentation.

    The returned rig is the noise-free ground truth; pose noise, when
    configured, is applied by callers that need it (``apply_pose_noise``).
    """
    wearer = synthesize_wearer(cfg, skel)
    people = synthesize_motion(cfg, skel)
    rig = synthesize_rig(cfg, wearer, skel)
    dets = render_detections(rig, people, cfg, skel)
    if cfg.apply_noise:
        dets = apply_keypoint_noise(dets, cfg.noise, cfg.seed, rig.cameras)
    if cfg.apply_masking:
        dets = apply_masking(dets, cfg.masking, cfg.seed)
    return Scene(rig, wearer, people, dets)


def handoff_scene(cfg: SimConfig, radius: float = 3.0, sweep_deg: float = 160.0,
                  skel: Skeleton = DEFAULT_SKELETON) -> Scene:
    """One person circling a still wearer from the left rear to the right rear.

    The wearer faces +x with a steady head, so the person crosses the side-left,
    front and side-right views of a ``quad_270`` rig in turn.
    """
    rng = np.random.default_rng([cfg.seed, 5])
    n, dt = cfg.num_frames, 1.0 / cfg.rate_hz
    zeros = np.zeros(n)
    theta, omega, tau = _animate(rng, np.zeros((n, 2)), zeros, zeros, dt,
                                 np.zeros(NUM_BETAS), skel, gesture_amp=0.0)
    wearer = MotionClip(theta, np.zeros((n, NUM_BETAS)), omega, tau, cfg.rate_hz, -1)
    sweep = np.radians(sweep_deg)
    ang = np.linspace(sweep, -sweep, n)
    xy = radius * np.column_stack([np.cos(ang), np.sin(ang)])
    speed = np.full(n, 2 * sweep * radius / (n * dt))
    heading = ang - np.pi / 2
    beta = np.clip(rng.normal(0, 1.0, NUM_BETAS), -2.5, 2.5)
    theta, omega, tau = _animate(rng, xy, heading, speed, dt, beta, skel)
    person = MotionClip(theta, np.tile(beta, (n, 1)), omega, tau, cfg.rate_hz, 0)
    rig = synthesize_rig(cfg, wearer, skel, head_motion=False)
    dets = render_detections(rig, [person], cfg, skel)
    if cfg.apply_noise:
        dets = apply_keypoint_noise(dets, cfg.noise, cfg.seed, rig.cameras)
    if cfg.apply_masking:
        dets = apply_masking(dets, cfg.masking, cfg.seed)
    return Scene(rig, wearer, [person], dets)


# ---------------------------------------------------------------- training stream

def states_to_local(clip: MotionClip, frame: SE3) -> BodyState:
    return transform_states(clip.states(), frame.inverse())


def sample_training_window(cfg: SimConfig, index: int, window: int,
                           skel: Skeleton = DEFAULT_SKELETON, layout: str | None = None,
                           augment: bool = True, min_frames: int = 5):
    """One (rays, local ground-truth states) training pair.

    A fresh two-person scene (wearer + observed person) is generated per
    index. With probability ``masking.clean_clip_prob`` the clip is left
    clean; otherwise keypoint noise and masking are applied.
    """
    layout = layout or cfg.rig_layout
    min_frames = min(min_frames, window)
    attempt = 0
    while True:
        rng = np.random.default_rng([cfg.seed, 7, index, attempt])
        out = _try_window(rng, cfg, window, skel, layout, augment, min_frames)
        if out is not None:
            return out
        attempt += 1


def _try_window(rng, cfg, window, skel, layout, augment, min_frames):
    margin = 10
    n = window + margin
    dt = 1.0 / cfg.rate_hz
    wearer = _person_clip(rng, n, dt, (0.0, 0.0), _disc_sampler((0, 0), 1.0),
                          (0.0, cfg.wearer_speed_max), -1, skel, cfg.rate_hz,
                          pause_prob=0.5, gesture_amp=0.0, beta=np.zeros(NUM_BETAS))
    sub = int(rng.integers(0, 2 ** 31))
    rcfg = cfg.model_copy(update={"seed": sub, "rig_layout": layout})
    rig = synthesize_rig(rcfg, wearer, skel)
    fx, fy = rot_z_cols(wearer.omega[0])
    face = np.arctan2(fy, fx)
    ang = face + rng.uniform(-np.pi / 2, np.pi / 2)
    r = rng.uniform(cfg.min_distance_m, cfg.max_distance_m)
    start = wearer.tau[0, :2] + r * np.array([np.cos(ang), np.sin(ang)])
    sampler = _annulus_sampler(wearer.tau[0, :2], cfg.min_distance_m, cfg.max_distance_m)
    person = _person_clip(rng, n, dt, start, sampler, (0.0, 1.6), 0, skel, cfg.rate_hz)
    dets = render_detections(rig, [person], rcfg, skel)
    if augment and rng.random() >= cfg.masking.clean_clip_prob:
        s = int(rng.integers(0, 2 ** 31))
        dets = apply_keypoint_noise(dets, cfg.noise, s, rig.cameras)
        dets = apply_masking(dets, cfg.masking.model_copy(update={"clean_clip_prob": 0.0}), s)
    t0 = int(rng.integers(0, margin + 1))
    kp = dets.keypoints[t0:t0 + window, :, 0]
    if (kp[..., 2] > 0).any(axis=(1, 2)).sum() < min_frames:
        return None
    cloud = lift_dense(rig, kp, t0)
    local = states_to_local(person.slice(t0, t0 + window), cloud.frame)
    return cloud.rays, local
