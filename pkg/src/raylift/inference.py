"""Causal sliding-window inference with same-timestamp averaging.

The window advances one frame at a time, so every frame is predicted by up
to T overlapping windows. Emission for frame ``t`` happens once frame
``t + latency`` has been processed and averages whatever candidates exist.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyState, matrix_to_rot6d, rot6d_to_matrix
from .fitter.net import predict
from .geometry import NUM_KEYPOINTS, CameraRig, RayCloud, lift_dense, normalizing_frame


def average_states(candidates: list) -> BodyState:
    """Uniform average: arithmetic for shape and translation, 6D for rotations."""
    if len(candidates) == 1:
        c = candidates[0]
        return BodyState(c.theta.copy(), c.beta.copy(), c.omega.copy(), c.tau.copy())
    theta = np.mean([c.theta for c in candidates], axis=0)
    omega = np.mean([c.omega for c in candidates], axis=0)
    return BodyState(matrix_to_rot6d(rot6d_to_matrix(theta)),
                     np.mean([c.beta for c in candidates], axis=0),
                     matrix_to_rot6d(rot6d_to_matrix(omega)),
                     np.mean([c.tau for c in candidates], axis=0))


@dataclass
class Emission:
    frame: int
    state: BodyState
    n_candidates: int


@dataclass
class WindowBuffer:
    """Per-tracklet ring of the last ``window`` frames plus pending candidates.

    ``predictor(rays, t0)`` maps a (T, K, 17, 3) keypoint window starting at
    rig frame ``t0`` to T world-frame BodyStates (frames before the tracklet
    was born are zero-padded). ``latency`` must lie in ``[0, window - 1]``.
    """
    window: int
    num_cameras: int
    latency: int
    predictor: object
    frames: deque = field(default_factory=deque)      # (t, (K, 17, 3))
    pending: dict = field(default_factory=dict)       # t -> [BodyState]
    last_t: int | None = None
    done: int | None = None                           # emitted through this frame

    def __post_init__(self):
        if not 0 <= self.latency <= self.window - 1:
            raise ValueError(f"latency must be in [0, {self.window - 1}]")

    def _emit(self, t: int) -> Emission | None:
        cands = self.pending.pop(t, None)
        if not cands:
            return None
        return Emission(t, average_states(cands), len(cands))

    def push(self, t: int, keypoints: np.ndarray) -> list:
        """Add frame ``t`` (K, 17, 3) and return the emissions it releases.

        Frames skipped since the previous push are filled with empty
        observations so the window always covers consecutive frames.
        """
        if self.last_t is not None and t <= self.last_t:
            raise ValueError("timestamps must be strictly increasing")
        out = []
        first = t if self.last_t is None else self.last_t + 1
        for s in range(first, t + 1):
            obs = keypoints if s == t else np.zeros((self.num_cameras, NUM_KEYPOINTS, 3))
            out.extend(self._advance(s, obs))
        self.last_t = t
        return out

    def _advance(self, t: int, keypoints: np.ndarray) -> list:
        self.frames.append((t, np.asarray(keypoints, dtype=float)))
        while len(self.frames) > self.window:
            self.frames.popleft()
        t0 = t - self.window + 1
        dense = np.zeros((self.window, self.num_cameras, NUM_KEYPOINTS, 3))
        for s, kp in self.frames:
            dense[s - t0] = kp
        states = self.predictor(dense, t0)
        for i in range(self.window):
            s = t0 + i
            if s < self.frames[0][0]:
                continue                      # padding before the tracklet existed
            if self.done is not None and s <= self.done:
                continue
            self.pending.setdefault(s, []).append(
                BodyState(states.theta[i], states.beta[i], states.omega[i], states.tau[i]))
        due = t - self.latency
        em = self._emit(due)
        self.done = due
        return [em] if em else []

    def finalize(self) -> list:
        """Flush every pending timestamp in order."""
        out = []
        for t in sorted(self.pending):
            em = self._emit(t)
            if em:
                out.append(em)
        if self.last_t is not None:
            self.done = self.last_t
        return out


def network_predictor(net, rig: CameraRig, pool_beta: bool = True):
    """Wrap a trained network as a ``WindowBuffer`` predictor.

    Windows whose first frame precedes the rig are lifted in the frame of the
    first frame that has a pose.
    """
    def run(keypoints: np.ndarray, t0: int) -> BodyState:
        T = keypoints.shape[0]
        lo = max(t0, 0)
        frame = normalizing_frame(rig, lo, T - (lo - t0))
        cloud = lift_dense(rig, keypoints[lo - t0:], lo, frame)
        rays = np.zeros(keypoints.shape[:3] + (7,))
        rays[lo - t0:] = cloud.rays
        return predict(net, RayCloud(rays, frame, t0), pool_beta)
    return run


class StreamRunner:
    """One :class:`WindowBuffer` per tracklet, driven frame by frame."""

    def __init__(self, rig: CameraRig, predictor_factory, window: int, latency: int):
        self.rig = rig
        self.window = window
        self.latency = latency
        self.factory = predictor_factory
        self.buffers: dict = {}
        self.emitted: list = []            # (tracklet_id, Emission)

    def push(self, t: int, observations: dict) -> list:
        """``observations``: tracklet_id -> (K, 17, 3) keypoints at frame t."""
        out = []
        for tid, kp in observations.items():
            buf = self.buffers.get(tid)
            if buf is None:
                buf = WindowBuffer(self.window, self.rig.num_cameras, self.latency,
                                   self.factory(tid))
                self.buffers[tid] = buf
            out.extend((tid, em) for em in buf.push(t, kp))
        self.emitted.extend(out)
        return out

    def finalize(self) -> list:
        out = [(tid, em) for tid, buf in self.buffers.items() for em in buf.finalize()]
        self.emitted.extend(out)
        return out


def write_stream(path, emissions, rig: CameraRig) -> int:
    """Motion records plus ``tracklet_id`` and ``n_candidates``, one JSON line each."""
    stamps = rig.timestamps_ns()
    rows = sorted(emissions, key=lambda e: (e[1].frame, e[0]))
    with open(path, "w") as fh:
        for tid, em in rows:
            s = em.state
            fh.write(json.dumps({
                "person_id": int(tid), "tracklet_id": int(tid),
                "timestamp_ns": int(stamps[em.frame]) if 0 <= em.frame < len(stamps)
                else int(rig.start_ns + round(em.frame * 1e9 / rig.rate_hz)),
                "theta": np.asarray(s.theta).reshape(-1).tolist(),
                "beta": np.asarray(s.beta).tolist(),
                "omega": np.asarray(s.omega).tolist(),
                "tau": np.asarray(s.tau).tolist(),
                "n_candidates": int(em.n_candidates)}) + "\n")
    return len(rows)
