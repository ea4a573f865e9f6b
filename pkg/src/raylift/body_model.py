"""A 23-joint parametric skeleton with a linear bone-length shape basis.

Stands in for a licensed mesh body model: it exposes the same
pose/shape/root-rotation/root-translation interface and produces joints plus
88 proxy surface points (4 per bone).

Body frame: x right, y forward, z up. Rotations are stored in the
continuous 6D form (first two columns of the rotation matrix).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

NUM_JOINTS = 23
NUM_BETAS = 10
NUM_KEYPOINTS = 17
SURFACE_PER_BONE = 4

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "left_foot", "right_foot", "neck",
    "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_ear",
    "right_ear",
)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 7, 8, 6, 6, 6, 11, 12, 13,
                    15, 16, 17, 18, 14, 14])

_REST_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [-0.09, 0.0, -0.08], [0.09, 0.0, -0.08], [0.0, -0.02, 0.11],
    [0.0, 0.01, -0.39], [0.0, 0.01, -0.39], [0.0, 0.01, 0.14],
    [0.0, -0.03, -0.40], [0.0, -0.03, -0.40],
    [0.0, 0.13, -0.06], [0.0, 0.13, -0.06],
    [0.0, -0.01, 0.24], [-0.07, -0.01, 0.19], [0.07, -0.01, 0.19],
    [0.0, 0.08, 0.12],
    [-0.11, -0.01, -0.02], [0.11, -0.01, -0.02],
    [0.0, 0.0, -0.27], [0.0, 0.0, -0.27],
    [0.0, 0.01, -0.25], [0.0, 0.01, -0.25],
    [-0.075, -0.08, 0.01], [0.075, -0.08, 0.01],
])

# bone index b corresponds to child joint b + 1
_BONE_RADII = np.array([
    0.05, 0.05, 0.10,      # hips, spine1
    0.08, 0.08, 0.10,      # thighs, spine2
    0.055, 0.055,          # shins
    0.04, 0.04,            # feet
    0.05, 0.05, 0.05,      # neck, collars
    0.09,                  # head
    0.05, 0.05,            # shoulders
    0.045, 0.045,          # upper arms
    0.035, 0.035,          # forearms
    0.03, 0.03,            # ears
])

COCO_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist",
    "right_wrist", "left_hip", "right_hip", "left_knee", "right_knee",
    "left_ankle", "right_ankle",
)
DISTAL_KEYPOINTS = (9, 10, 15, 16)
FEET_KEYPOINTS = (15, 16)


def _keypoint_map() -> np.ndarray:
    M = np.zeros((NUM_KEYPOINTS, NUM_JOINTS))
    direct = {name: name for name in COCO_NAMES if name in J}
    direct["nose"] = "head"
    for kp, jn in direct.items():
        M[COCO_NAMES.index(kp), J[jn]] = 1.0
    for side in ("left", "right"):
        row = COCO_NAMES.index(f"{side}_eye")
        M[row, J["head"]] = 0.65
        M[row, J[f"{side}_ear"]] = 0.35
    return M


def _shape_basis() -> np.ndarray:
    """(10, 22) per-bone relative length change per unit beta."""
    B = np.zeros((NUM_BETAS, NUM_JOINTS - 1))

    def bones(*names):
        return [J[n] - 1 for n in names]

    legs = bones("left_knee", "right_knee", "left_ankle", "right_ankle")
    torso = bones("spine1", "spine2", "neck")
    arms = bones("left_elbow", "right_elbow", "left_wrist", "right_wrist")
    B[0, :] = 0.05
    B[1, legs] = 0.03
    B[1, torso] = -0.01
    B[2, arms] = 0.03
    B[3, torso] = 0.03
    B[4, bones("left_collar", "right_collar", "left_shoulder", "right_shoulder")] = 0.03
    B[5, bones("left_hip", "right_hip")] = 0.03
    B[6, bones("head", "left_ear", "right_ear")] = 0.03
    B[7, bones("left_foot", "right_foot")] = 0.03
    B[8, bones("left_knee", "right_knee")] = 0.02
    B[8, bones("left_ankle", "right_ankle")] = -0.02
    B[9, bones("left_elbow", "right_elbow")] = 0.02
    B[9, bones("left_wrist", "right_wrist")] = -0.02
    return B


def _surface_offsets() -> np.ndarray:
    """(22, 4, 3) surface points per bone in the parent joint's frame."""
    out = np.zeros((NUM_JOINTS - 1, SURFACE_PER_BONE, 3))
    for b in range(NUM_JOINTS - 1):
        o = _REST_OFFSETS[b + 1]
        d = o / np.linalg.norm(o)
        helper = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(d, helper)
        u /= np.linalg.norm(u)
        v = np.cross(d, u)
        r = _BONE_RADII[b]
        out[b] = [0.35 * o + r * u, 0.35 * o - r * u,
                  0.65 * o + r * v, 0.65 * o - r * v]
    return out


@dataclass(frozen=True)
class Skeleton:
    parents: np.ndarray = field(default_factory=lambda: PARENTS.copy())
    rest_offsets: np.ndarray = field(default_factory=lambda: _REST_OFFSETS.copy())
    shape_basis: np.ndarray = field(default_factory=_shape_basis)
    keypoint_map: np.ndarray = field(default_factory=_keypoint_map)
    surface_offsets: np.ndarray = field(default_factory=_surface_offsets)

    @property
    def num_surface(self) -> int:
        return (NUM_JOINTS - 1) * SURFACE_PER_BONE

    def bone_scales(self, beta) -> np.ndarray:
        return 1.0 + np.asarray(beta) @ self.shape_basis

    def ground_offset(self, beta=None) -> float:
        """Height of the pelvis above the lowest joint in the rest pose."""
        beta = np.zeros(NUM_BETAS) if beta is None else beta
        joints, _ = forward_kinematics(self, BodyState.rest(beta=beta))
        return float(-joints[:, 2].min())


DEFAULT_SKELETON = Skeleton()


class DegenerateRotation(ValueError):
    pass


def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt map from (..., 6) to (..., 3, 3) rotation matrices."""
    r = np.asarray(r, dtype=float)
    a1, a2 = r[..., :3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-9):
        raise DegenerateRotation("first 6D column is (near) zero")
    b1 = a1 / n1
    w = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(w, axis=-1, keepdims=True)
    if np.any(n2 <= 1e-9 * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateRotation("6D columns are (near) parallel")
    b2 = w / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def orthonormalize6d(r) -> np.ndarray:
    return matrix_to_rot6d(rot6d_to_matrix(r))


IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def theta_to_axis_angle(theta6d) -> np.ndarray:
    """(..., 23, 6) joint rotations to (..., 69) axis-angle."""
    theta6d = np.asarray(theta6d, dtype=float)
    R = rot6d_to_matrix(theta6d).reshape(-1, 3, 3)
    aa = Rotation.from_matrix(R).as_rotvec()
    return aa.reshape(theta6d.shape[:-2] + (NUM_JOINTS * 3,))


def axis_angle_to_theta(aa) -> np.ndarray:
    aa = np.asarray(aa, dtype=float)
    R = Rotation.from_rotvec(aa.reshape(-1, 3)).as_matrix()
    return matrix_to_rot6d(R).reshape(aa.shape[:-1] + (NUM_JOINTS, 6))


@dataclass
class BodyState:
    """Pose (23x6D), shape (10), root rotation (6D) and root translation (m)."""
    theta: np.ndarray
    beta: np.ndarray
    omega: np.ndarray
    tau: np.ndarray

    @classmethod
    def rest(cls, beta=None, tau=None) -> "BodyState":
        return cls(np.tile(IDENTITY_6D, (NUM_JOINTS, 1)),
                   np.zeros(NUM_BETAS) if beta is None else np.asarray(beta, float),
                   IDENTITY_6D.copy(),
                   np.zeros(3) if tau is None else np.asarray(tau, float))

    def vector(self) -> np.ndarray:
        """Flattened parameter vector (157,) used by the parameter loss."""
        return np.concatenate([self.theta.reshape(-1), self.beta,
                               self.omega, self.tau])


@dataclass
class MotionClip:
    """Stacked per-frame body states of one person at a fixed rate.

    ``start`` is the scene frame index of row 0.
    """
    theta: np.ndarray   # (T, 23, 6)
    beta: np.ndarray    # (T, 10)
    omega: np.ndarray   # (T, 6)
    tau: np.ndarray     # (T, 3)
    rate_hz: float = 30.0
    person_id: int = 0
    start: int = 0

    def __post_init__(self):
        if len(self.tau) < 2:
            raise ValueError("a motion clip needs at least two frames")

    def __len__(self) -> int:
        return len(self.tau)

    def state(self, i: int) -> BodyState:
        return BodyState(self.theta[i], self.beta[i], self.omega[i], self.tau[i])

    def states(self) -> BodyState:
        """All frames as one batched BodyState."""
        return BodyState(self.theta, self.beta, self.omega, self.tau)

    @classmethod
    def from_states(cls, states, rate_hz=30.0, person_id=0, start=0) -> "MotionClip":
        return cls(np.stack([s.theta for s in states]), np.stack([s.beta for s in states]),
                   np.stack([s.omega for s in states]), np.stack([s.tau for s in states]),
                   rate_hz, person_id, start)

    def slice(self, a: int, b: int) -> "MotionClip":
        return MotionClip(self.theta[a:b], self.beta[a:b], self.omega[a:b],
                          self.tau[a:b], self.rate_hz, self.person_id, self.start + a)


def forward_kinematics(skel: Skeleton, state: BodyState):
    """World joints (..., 23, 3) and surface points (..., 88, 3).

    Works on a single state or a batch with arbitrary leading dimensions.
    """
    local = rot6d_to_matrix(state.theta)                     # (..., 23, 3, 3)
    root = rot6d_to_matrix(state.omega)                      # (..., 3, 3)
    scales = skel.bone_scales(state.beta)                    # (..., 22)
    lead = np.shape(state.tau)[:-1]
    G = np.empty(lead + (NUM_JOINTS, 3, 3))
    P = np.empty(lead + (NUM_JOINTS, 3))
    S = np.empty(lead + (NUM_JOINTS - 1, SURFACE_PER_BONE, 3))
    G[..., 0, :, :] = root @ local[..., 0, :, :]
    P[..., 0, :] = state.tau
    for j in range(1, NUM_JOINTS):
        p = skel.parents[j]
        s = scales[..., j - 1, None]
        Gp = G[..., p, :, :]
        P[..., j, :] = P[..., p, :] + np.einsum("...ab,b->...a", Gp, skel.rest_offsets[j]) * s
        S[..., j - 1, :, :] = (P[..., p, None, :]
                               + np.einsum("...ab,nb->...na", Gp, skel.surface_offsets[j - 1])
                               * s[..., None])
        G[..., j, :, :] = Gp @ local[..., j, :, :]
    return P, S.reshape(lead + (skel.num_surface, 3))


def observed_keypoints(skel: Skeleton, joints) -> np.ndarray:
    """Map (..., 23, 3) joints to (..., 17, 3) detector-style keypoints."""
    return np.einsum("kj,...jc->...kc", skel.keypoint_map, np.asarray(joints))


def clip_joints(skel: Skeleton, clip: MotionClip) -> np.ndarray:
    return forward_kinematics(skel, clip.states())[0]


def joint_velocity(clip: MotionClip, skel: Skeleton = DEFAULT_SKELETON) -> np.ndarray:
    """Forward-difference joint velocity in m/s, shape (T-1, 23, 3)."""
    if len(clip) < 2:
        raise ValueError("joint velocity needs at least two frames")
    joints = clip_joints(skel, clip)
    return np.diff(joints, axis=0) * clip.rate_hz


def transform_states(states: BodyState, T) -> BodyState:
    """Apply a rigid transform (SE3) to the root of a (batched) state."""
    R = rot6d_to_matrix(states.omega)
    omega = matrix_to_rot6d(T.rotation @ R)
    tau = states.tau @ T.rotation.T + T.translation
    return BodyState(states.theta, states.beta, omega, tau)
