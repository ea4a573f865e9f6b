"""Rigid transforms, pinhole cameras, gravity alignment and Plücker ray lifting.

Conventions
-----------
* World frame is z-up.
* Camera frame is x right, y down, z forward (optical axis).
* ``SE3`` objects named ``T_a_b`` map coordinates from frame ``b`` into
  frame ``a`` (``p_a = T_a_b @ p_b``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

NUM_KEYPOINTS = 17
NEAR_PLANE = 0.05
_DEGENERATE_YAW = 1e-6


class GeometryError(ValueError):
    """Base class for rejected geometric inputs."""


class PixelOutOfBounds(GeometryError):
    pass


class MissingPoseError(GeometryError):
    pass


@dataclass(frozen=True)
class SE3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "SE3":
        M = np.asarray(M, dtype=float).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "SE3":
        Rt = self.rotation.T
        return SE3(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, SE3):
            return SE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)
        return self.apply(other)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=tol)
                    and abs(np.linalg.det(R) - 1.0) < tol)


def _rot(a, i, j):
    a = np.asarray(a, dtype=float)
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    k = 3 - i - j
    R[..., k, k] = 1.0
    R[..., i, i] = c
    R[..., j, j] = c
    R[..., i, j] = -s
    R[..., j, i] = s
    return R


def rot_x(a) -> np.ndarray:
    """Rotation(s) about x; accepts scalar or array angles."""
    return _rot(a, 1, 2)


def rot_y(a) -> np.ndarray:
    return _rot(a, 2, 0)


def rot_z(a) -> np.ndarray:
    return _rot(a, 0, 1)


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula for an axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1 - np.cos(theta)) / theta ** 2 * K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-9:
        return v / 2
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        A = (R + np.eye(3)) / 2
        axis = A[np.argmax(np.diag(A))]
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    return v * theta / (2 * np.sin(theta))


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError("principal point outside the image")

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= 0) & (uv[..., 0] <= self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] <= self.height))


def unproject_unchecked(cam: CameraModel, uv) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    x = (uv[..., 0] - cam.cx) / cam.fx
    y = (uv[..., 1] - cam.cy) / cam.fy
    v = np.stack([x, y, np.ones_like(x)], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def unproject(cam: CameraModel, pixel) -> np.ndarray:
    """Unit ray in the camera frame through ``pixel`` (shape (..., 2))."""
    if not np.all(cam.in_bounds(pixel)):
        raise PixelOutOfBounds(f"pixel {np.asarray(pixel).tolist()} outside "
                               f"{cam.width}x{cam.height} image")
    return unproject_unchecked(cam, pixel)


def project(cam: CameraModel, cam_pose: SE3, point_world):
    """Pinhole projection of world points.

    ``cam_pose`` is ``T_world_cam``. Returns ``(pixel, visible)``; points at
    or behind the near plane get NaN pixels and ``visible=False``.
    """
    p = cam_pose.inverse().apply(point_world)
    z = p[..., 2]
    front = z > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, cam.fx * p[..., 0] / z + cam.cx, np.nan)
        v = np.where(front, cam.fy * p[..., 1] / z + cam.cy, np.nan)
    uv = np.stack([u, v], axis=-1)
    visible = front & cam.in_bounds(np.nan_to_num(uv, nan=-1.0))
    if np.ndim(visible) == 0:
        visible = bool(visible)
    return uv, visible


def gravity_align(pose: SE3) -> SE3:
    """Keep yaw and translation of a camera pose, dropping roll and pitch.

    The new x-axis is the horizontal projection of the camera's optical axis.
    When that axis is vertical, the camera x-axis is used instead, then world x.
    """
    R = pose.rotation
    for axis in (R[:, 2], R[:, 0], np.array([1.0, 0.0, 0.0])):
        h = np.array([axis[0], axis[1], 0.0])
        n = np.linalg.norm(h)
        if n > _DEGENERATE_YAW:
            break
    x = h / n
    z = np.array([0.0, 0.0, 1.0])
    y = np.cross(z, x)
    return SE3(np.stack([x, y, z], axis=1), pose.translation.copy())


@dataclass(frozen=True)
class CameraRig:
    """Cameras rigidly mounted on a tracked device.

    ``extrinsics[k]`` is ``T_body_cam`` for camera ``k``; ``device_poses`` is an
    (N, 4, 4) array of ``T_world_body`` sampled at ``rate_hz`` starting at
    ``start_ns``. Frame ``i`` has timestamp ``start_ns + round(i * 1e9 / rate_hz)``.
    """
    cameras: tuple
    extrinsics: tuple
    device_poses: np.ndarray
    rate_hz: float = 30.0
    start_ns: int = 0

    def __post_init__(self):
        if len(self.cameras) == 0:
            raise GeometryError("rig needs at least camera 0")
        if len(self.cameras) != len(self.extrinsics):
            raise GeometryError("one extrinsic per camera required")
        poses = np.asarray(self.device_poses, dtype=float).reshape(-1, 4, 4)
        object.__setattr__(self, "device_poses", poses)
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "extrinsics", tuple(self.extrinsics))

    @property
    def num_cameras(self) -> int:
        return len(self.cameras)

    @property
    def num_frames(self) -> int:
        return self.device_poses.shape[0]

    def timestamps_ns(self) -> np.ndarray:
        i = np.arange(self.num_frames)
        return self.start_ns + np.round(i * 1e9 / self.rate_hz).astype(np.int64)

    def has_frame(self, t: int) -> bool:
        return 0 <= t < self.num_frames

    def device_pose(self, t: int) -> SE3:
        if not self.has_frame(t):
            raise MissingPoseError(f"no device pose for frame {t}")
        return SE3.from_matrix(self.device_poses[t])

    def camera_pose(self, t: int, k: int) -> SE3:
        return self.device_pose(t) @ self.extrinsics[k]

    def camera_poses_array(self, frames, k: int):
        """Vectorised ``T_world_cam`` rotations (F,3,3) and centres (F,3)."""
        frames = np.asarray(frames, dtype=int)
        if frames.size and (frames.min() < 0 or frames.max() >= self.num_frames):
            raise MissingPoseError("window needs device poses outside the rig")
        D = self.device_poses[frames]
        E = self.extrinsics[k]
        R = D[:, :3, :3] @ E.rotation
        c = D[:, :3, :3] @ E.translation + D[:, :3, 3]
        return R, c

    def with_poses(self, device_poses) -> "CameraRig":
        return CameraRig(self.cameras, self.extrinsics, device_poses,
                         self.rate_hz, self.start_ns)

    def subset(self, cams: Sequence[int]) -> "CameraRig":
        return CameraRig(tuple(self.cameras[k] for k in cams),
                         tuple(self.extrinsics[k] for k in cams),
                         self.device_poses, self.rate_hz, self.start_ns)


@dataclass(frozen=True)
class RayCloud:
    """Dense (T, K, J, 7) array of [direction, moment, confidence] rays.

    ``frame`` is ``T_world_local``; ``start`` is the rig frame index of row 0.
    """
    rays: np.ndarray
    frame: SE3
    start: int = 0

    @property
    def shape(self):
        return self.rays.shape

    def valid(self) -> np.ndarray:
        return self.rays[..., 6] > 0


def normalizing_frame(rig: CameraRig, t0: int, T: int) -> SE3:
    """Gravity-aligned frame of camera 0 at the first window frame with a pose."""
    for t in range(t0, t0 + T):
        if rig.has_frame(t):
            return gravity_align(rig.camera_pose(t, 0))
    raise MissingPoseError(f"no device pose inside window [{t0}, {t0 + T})")


def lift_keypoints(rig: CameraRig, detections: Mapping, window) -> RayCloud:
    """Lift 2D keypoints to Plücker rays in the window's local frame.

    Parameters
    ----------
    detections : mapping
        ``(t, k) -> (17, 3)`` array of ``[u, v, confidence]``; keypoints with
        zero confidence are treated as missing.
    window : (t0, T)
        First frame index and window length.
    """
    t0, T = window
    K = rig.num_cameras
    kp = np.zeros((T, K, NUM_KEYPOINTS, 3))
    for (t, k), arr in detections.items():
        if not (t0 <= t < t0 + T):
            raise GeometryError(f"detection at frame {t} outside window")
        kp[t - t0, k] = arr
    return lift_dense(rig, kp, t0)


def lift_dense(rig: CameraRig, keypoints: np.ndarray, t0: int,
               frame: SE3 | None = None) -> RayCloud:
    """Vectorised lifting of a dense (T, K, J, 3) keypoint array."""
    T, K, J, _ = keypoints.shape
    if frame is None:
        frame = normalizing_frame(rig, t0, T)
    L_from_W = frame.inverse()
    conf = keypoints[..., 2]
    valid = conf > 0
    rays = np.zeros((T, K, J, 7))
    frames_needed = np.nonzero(valid.any(axis=(1, 2)))[0]
    if frames_needed.size == 0:
        return RayCloud(rays, frame, t0)
    ts = t0 + frames_needed
    for k in range(K):
        sel = valid[frames_needed, k]
        if not sel.any():
            continue
        R, c = rig.camera_poses_array(ts, k)
        R_l = L_from_W.rotation @ R                      # (F,3,3)
        o_l = L_from_W.apply(c)                          # (F,3)
        d_cam = unproject_unchecked(rig.cameras[k], keypoints[frames_needed, k, :, :2])
        d = np.einsum("fab,fjb->fja", R_l, d_cam)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        m = np.cross(o_l[:, None, :], d)
        block = np.concatenate([d, m, conf[frames_needed, k, :, None]], axis=-1)
        block[~sel] = 0.0
        rays[frames_needed, k] = block
    return RayCloud(rays, frame, t0)


def ray_points(rays: np.ndarray) -> np.ndarray:
    """Closest point of each Plücker line to the origin: d x m."""
    return np.cross(rays[..., :3], rays[..., 3:6])


def box_iou(a, b) -> float:
    """IoU of two [x0, y0, x1, y1] boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / ua) if ua > 0 else 0.0


def hull_box(uv: np.ndarray, dilation: float = 0.1, min_size: float = 0.0):
    """Axis-aligned hull of (N, 2) points, scaled by ``1 + dilation`` about its centre."""
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    ctr = (lo + hi) / 2
    half = np.maximum((hi - lo) * (1 + dilation) / 2, min_size / 2)
    return np.concatenate([ctr - half, ctr + half])


def intersect_rays(directions, points, mask=None, min_angle_deg: float = 1.0):
    """Least-squares intersection of lines, batched over leading axes.

    ``directions`` and ``points`` are (..., N, 3) unit directions and points on
    each line; ``mask`` (..., N) selects the lines to use. Returns the point
    minimising the summed squared distances (..., 3) and a validity flag,
    which needs two used lines at least ``min_angle_deg`` apart and a
    well-conditioned normal matrix.
    """
    d = np.asarray(directions, dtype=float)
    o = np.asarray(points, dtype=float)
    w = np.ones(d.shape[:-1]) if mask is None else np.asarray(mask, dtype=float)
    proj = np.eye(3) - d[..., :, None] * d[..., None, :]           # (..., N, 3, 3)
    A = np.einsum("...n,...nab->...ab", w, proj)
    b = np.einsum("...n,...nab,...nb->...a", w, proj, o)
    cos = np.abs(np.einsum("...ia,...ja->...ij", d, d))
    pair = w[..., :, None] * w[..., None, :] > 0
    separated = (pair & (cos < np.cos(np.radians(min_angle_deg)))).any(axis=(-1, -2))
    eig = np.linalg.eigvalsh(A)
    ok = separated & (eig[..., 0] > 1e-12 * np.maximum(eig[..., -1], 1e-300))
    safe = np.where(ok[..., None, None], A, np.eye(3))
    x = np.linalg.solve(safe, np.where(ok[..., None], b, 0.0)[..., None])[..., 0]
    return np.where(ok[..., None], x, 0.0), ok
