"""Tracking-by-detection in world coordinates.

Tracklets keep a 3D keypoint anchor in the world frame. Each frame the
anchor is projected into every camera of the rig, so head motion is
compensated before boxes are compared with the new detections.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .body_model import BodyState, DEFAULT_SKELETON, forward_kinematics, observed_keypoints
from .config import TrackConfig
from .geometry import (CameraRig, NEAR_PLANE, box_iou, hull_box, intersect_rays,
                       unproject_unchecked)

ACTIVE = "active"
INACTIVE = "inactive"
_DEPTH_RANGE = (0.5, 10.0)


def _rest_keypoints() -> np.ndarray:
    joints, _ = forward_kinematics(DEFAULT_SKELETON, BodyState.rest())
    return observed_keypoints(DEFAULT_SKELETON, joints)


REST_KEYPOINTS = _rest_keypoints()     # (17, 3), pelvis at the origin, z up


# ---------------------------------------------------------------- assignment

@dataclass
class Assignment:
    pairs: list            # [(row, col)]
    unmatched_rows: list
    unmatched_cols: list
    cost: float


def _kuhn_munkres(C: np.ndarray) -> np.ndarray:
    """Min-cost assignment of every row for an n x m matrix with n <= m.

    Shortest augmenting paths with row/column potentials, O(n^2 m).
    Returns the column assigned to each row.
    """
    n, m = C.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)       # owner[j] = row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = C[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> Assignment:
    """Minimum-cost matching of a rectangular cost matrix.

    Entries that are ``inf`` or ``nan`` mark infeasible pairs. Among matchings
    of maximum feasible cardinality the one with least total cost is returned.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    n, m = C.shape
    if n == 0 or m == 0:
        return Assignment([], list(range(n)), list(range(m)), 0.0)
    feasible = np.isfinite(C)
    transposed = n > m
    if transposed:
        C, feasible = C.T, feasible.T
    finite = np.abs(C[feasible])
    big = (finite.sum() + 1.0) * 2.0 if finite.size else 1.0
    work = np.where(feasible, C, big)
    cols = _kuhn_munkres(work)
    pairs = [(i, int(j)) for i, j in enumerate(cols) if feasible[i, j]]
    if transposed:
        pairs = [(j, i) for i, j in pairs]
    pairs.sort()
    rows_used = {r for r, _ in pairs}
    cols_used = {c for _, c in pairs}
    total = float(sum(np.asarray(cost, dtype=float)[r, c] for r, c in pairs))
    rows = np.asarray(cost).shape[0]
    cols_n = np.asarray(cost).shape[1]
    return Assignment(pairs, [r for r in range(rows) if r not in rows_used],
                      [c for c in range(cols_n) if c not in cols_used], total)


# ---------------------------------------------------------------- tracklets

@dataclass
class Tracklet:
    """One person's identity and observations.

    ``anchor`` holds the latest world-frame keypoints (17, 3) in metres,
    either bootstrapped from detection rays or written back by the fitter.
    """
    id: int
    born: int
    last_seen: int
    anchor: np.ndarray
    state: str = ACTIVE
    observations: dict = field(default_factory=dict)    # t -> {camera: (17, 3)}
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    observed: np.ndarray = field(default_factory=lambda: np.zeros(17, dtype=bool))

    def observe(self, t: int, k: int, keypoints: np.ndarray) -> None:
        if self.observations and t < max(self.observations):
            raise ValueError("observations must arrive in time order")
        self.observations.setdefault(t, {})[k] = np.asarray(keypoints, dtype=float)
        self.last_seen = t


def predict_boxes(anchors, rig: CameraRig, t: int, dilation: float = 0.1,
                  min_size: float = 20.0, margin: float = 0.0) -> list:
    """Project each anchor into every camera at frame ``t``.

    Returns one list per anchor with a box or ``None`` per camera; a box is
    missing when no anchor point lands in front of the camera and inside the
    image grown by ``margin`` pixels.
    """
    out = [[None] * rig.num_cameras for _ in anchors]
    if not anchors:
        return out
    pts = np.stack([np.asarray(a, dtype=float) for a in anchors])        # (A, N, 3)
    for k, cam in enumerate(rig.cameras):
        R, c = rig.camera_poses_array([t], k)
        pc = (pts - c[0]) @ R[0]
        z = pc[..., 2]
        front = z > NEAR_PLANE
        zs = np.where(front, z, 1.0)
        uv = np.stack([cam.fx * pc[..., 0] / zs + cam.cx,
                       cam.fy * pc[..., 1] / zs + cam.cy], -1)
        vis = (front & (uv[..., 0] >= -margin) & (uv[..., 0] <= cam.width + margin)
               & (uv[..., 1] >= -margin) & (uv[..., 1] <= cam.height + margin))
        for a in range(len(anchors)):
            if vis[a].any():
                out[a][k] = hull_box(uv[a][vis[a]], dilation, min_size)
    return out


def _detection_rays(rig: CameraRig, t: int, k: int, keypoints: np.ndarray):
    R, c = rig.camera_poses_array([t], k)
    d = unproject_unchecked(rig.cameras[k], keypoints[:, :2]) @ R[0].T
    return d, c[0], keypoints[:, 2] > 0


def _closest_on_rays(d, origin, ref):
    """Point on each ray (origin + s d, s > near plane) nearest to ``ref``."""
    s = np.maximum(np.einsum("ja,ja->j", ref - origin, d), NEAR_PLANE)
    return origin + s[:, None] * d


class Tracker:
    """Frame-by-frame association state machine.

    Call :meth:`step` with strictly increasing frame indices. Detections are
    ``(camera, keypoints (17, 3), box)`` tuples; extra tuple items are ignored.
    """

    def __init__(self, rig: CameraRig, cfg: TrackConfig = TrackConfig()):
        self.rig = rig
        self.cfg = cfg
        self.tracklets: list[Tracklet] = []
        self._next_id = 0
        self._last_t: int | None = None

    @property
    def active(self) -> list:
        return [tr for tr in self.tracklets if tr.state == ACTIVE]

    def _timeout_frames(self) -> float:
        return self.cfg.timeout_s * self.rig.rate_hz

    def _predicted_anchor(self, tr: Tracklet, t: int) -> np.ndarray:
        return tr.anchor + tr.velocity * (t - tr.last_seen)

    def _bootstrap_depth(self, k: int, keypoints: np.ndarray) -> float:
        """Depth from apparent size against a rest-pose template, else the default."""
        ok = np.nonzero(keypoints[:, 2] > 0)[0]
        if len(ok) >= 2:
            i, j = np.triu_indices(len(ok), 1)
            a, b = ok[i], ok[j]
            px = np.linalg.norm(keypoints[a, :2] - keypoints[b, :2], axis=1)
            metres = np.linalg.norm(REST_KEYPOINTS[a] - REST_KEYPOINTS[b], axis=1)
            use = (px > 4.0) & (metres > 0.2)
            if use.any():
                cam = self.rig.cameras[k]
                depth = np.median(metres[use] / px[use]) * 0.5 * (cam.fx + cam.fy)
                return float(np.clip(depth, *_DEPTH_RANGE))
        return self.cfg.bootstrap_depth_m

    def _bootstrap(self, t: int, k: int, keypoints: np.ndarray) -> np.ndarray:
        """Initial anchor: seen keypoints on their rays, the rest from an upright template."""
        d, o, ok = _detection_rays(self.rig, t, k, keypoints)
        seen = o + self._bootstrap_depth(k, keypoints) * d[ok]
        look = d[ok].mean(axis=0)
        fwd = -np.array([look[0], look[1], 0.0])
        fwd = fwd / np.linalg.norm(fwd) if np.linalg.norm(fwd) > 1e-9 else np.array([0.0, 1.0, 0.0])
        up = np.array([0.0, 0.0, 1.0])
        R = np.stack([np.cross(fwd, up), fwd, up], axis=1)
        body = REST_KEYPOINTS @ R.T
        anchor = body + (seen.mean(axis=0) - body[ok].mean(axis=0))
        anchor[ok] = seen
        return anchor

    def _spawn(self, t: int, k: int, keypoints: np.ndarray) -> Tracklet:
        tr = Tracklet(self._next_id, t, t, self._bootstrap(t, k, keypoints))
        tr.observed = keypoints[:, 2] > 0
        self._next_id += 1
        self.tracklets.append(tr)
        return tr

    def _refresh_anchor(self, tr: Tracklet, t: int, prior: np.ndarray, gap: int) -> None:
        """Re-estimate the anchor from this frame's views.

        Keypoints seen by two or more cameras are triangulated; the rest keep
        their previous distance along the new ray, and unseen keypoints follow
        the mean displacement. The velocity only feeds box prediction.
        """
        views = tr.observations[t]
        rays = [_detection_rays(self.rig, t, k, kp) for k, kp in views.items()]
        d = np.stack([r[0] for r in rays], axis=1)                        # (17, V, 3)
        o = np.broadcast_to(np.stack([r[1] for r in rays])[None], d.shape)
        ok = np.stack([r[2] for r in rays], axis=1)
        last = tr.anchor
        new = last.copy()
        seen = ok.any(axis=1)
        if len(rays) >= 2:
            tri, valid = intersect_rays(d, o, ok)
            valid &= (np.einsum("jva,jva->jv", tri[:, None] - o, d) > 0).all(axis=1)
            new[valid] = tri[valid]
        else:
            valid = np.zeros(len(prior), dtype=bool)
        for v in range(len(rays)):
            rest = ok[:, v] & ~valid
            if rest.any():
                new[rest] = _closest_on_rays(d[rest, v], o[rest, v], last[rest])
            valid |= rest
        if seen.any():
            shift = (new[seen] - last[seen]).mean(axis=0)
            new[~seen] = last[~seen] + shift
        tr.observed |= seen
        if gap > 0:
            step = (new.mean(axis=0) - last.mean(axis=0)) / gap
            tr.velocity = 0.5 * tr.velocity + 0.5 * step
        tr.anchor = new

    def _keypoint_cost(self, tr: Tracklet, anchor: np.ndarray, t: int, det) -> float:
        """Mean keypoint reprojection gap relative to a tolerance; inf when >= 1.

        Only keypoints the tracklet has actually observed are compared when
        there are any, since the others are filled in from a template.
        """
        k, kp, box = det
        ok = kp[:, 2] > 0
        if (ok & tr.observed).any():
            ok = ok & tr.observed
        R, c = self.rig.camera_poses_array([t], k)
        pc = (anchor[ok] - c[0]) @ R[0]
        if not ok.any() or (pc[:, 2] <= NEAR_PLANE).any():
            return np.inf
        cam = self.rig.cameras[k]
        uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx,
                       cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], -1)
        gap = np.linalg.norm(uv - kp[ok, :2], axis=1).mean()
        size = np.hypot(box[2] - box[0], box[3] - box[1])
        tol = max(2.0 * self.cfg.min_box_px, 0.25 * size)
        return gap / tol if gap < tol else np.inf

    def _padded(self, box) -> np.ndarray:
        box = np.asarray(box, dtype=float)
        return hull_box(box.reshape(2, 2), 0.0, self.cfg.min_box_px)

    def set_anchor(self, tracklet_id: int, keypoints_world) -> None:
        """Overwrite a tracklet's anchor, e.g. with the fitter's newest frame."""
        for tr in self.tracklets:
            if tr.id == tracklet_id:
                tr.anchor = np.asarray(keypoints_world, dtype=float).copy()
                return
        raise KeyError(tracklet_id)

    def step(self, t: int, detections) -> list:
        """Associate the detections of frame ``t``.

        Returns ``(tracklet_id, detection_index)`` pairs covering every
        detection that was kept.
        """
        if self._last_t is not None and t <= self._last_t:
            raise ValueError("frames must be strictly increasing")
        self._last_t = t
        for tr in self.active:
            if t - tr.last_seen > self._timeout_frames():
                tr.state = INACTIVE
        live = self.active
        priors = {tr.id: self._predicted_anchor(tr, t) for tr in live}
        gaps = {tr.id: t - tr.last_seen for tr in live}
        boxes = predict_boxes([priors[tr.id] for tr in live], self.rig, t,
                              self.cfg.box_dilation, self.cfg.min_box_px, self.cfg.min_box_px)
        dets = [(int(d[0]), np.asarray(d[1], dtype=float), self._padded(d[2]))
                for d in detections]
        matches: list[tuple[int, int]] = []
        assigned = set()
        for k in range(self.rig.num_cameras):
            rows = [i for i, d in enumerate(dets) if d[0] == k]
            cols = [c for c, tr in enumerate(live) if boxes[c][k] is not None]
            if not rows or not cols:
                continue
            cost = np.full((len(rows), len(cols)), np.inf)
            for a, i in enumerate(rows):
                for b, c in enumerate(cols):
                    iou = box_iou(dets[i][2], boxes[c][k])
                    if iou >= self.cfg.iou_gate:
                        cost[a, b] = 1.0 - iou
            for a, b in hungarian(cost).pairs:
                matches.append((live[cols[b]].id, rows[a]))
                assigned.add(rows[a])

        # second chance for leftovers (typically slivers at an image border):
        # compare keypoints directly against the projected anchor
        for k in range(self.rig.num_cameras):
            taken = {tid for tid, i in matches if dets[i][0] == k}
            rows = [i for i, d in enumerate(dets) if d[0] == k and i not in assigned]
            cols = [tr for tr in live if tr.id not in taken]
            if not rows or not cols:
                continue
            cost = np.array([[self._keypoint_cost(tr, priors[tr.id], t, dets[i]) for tr in cols]
                             for i in rows])
            for a, b in hungarian(cost).pairs:
                matches.append((cols[b].id, rows[a]))
                assigned.add(rows[a])

        by_id = {tr.id: tr for tr in self.tracklets}
        for tid, i in matches:
            by_id[tid].observe(t, dets[i][0], dets[i][1])

        # still unmatched: join a tracklet born this frame or start one
        newborn: list[Tracklet] = []
        order = sorted(range(len(dets)), key=lambda i: -int((dets[i][1][:, 2] > 0).sum()))
        for i in order:
            k, kp, box = dets[i]
            if i in assigned or not (kp[:, 2] > 0).any():
                continue
            host, best = None, 1.0
            for tr in newborn:
                if k in tr.observations[t]:
                    continue
                c = self._keypoint_cost(tr, tr.anchor, t, dets[i])
                if c < best:
                    host, best = tr, c
            if host is None:
                if (kp[:, 2] > 0).sum() < self.cfg.min_spawn_keypoints:
                    continue
                host = self._spawn(t, k, kp)
                newborn.append(host)
                priors[host.id] = host.anchor
                gaps[host.id] = 0
            host.observe(t, k, kp)
            matches.append((host.id, i))

        by_id = {tr.id: tr for tr in self.tracklets}
        for tid in sorted({tid for tid, _ in matches}):
            self._refresh_anchor(by_id[tid], t, priors[tid], gaps[tid])
        return sorted(matches, key=lambda m: m[1])

    def run(self, frames) -> list:
        """Drive :meth:`step` over ``(t, detections)`` pairs; returns per-frame matches."""
        return [self.step(t, dets) for t, dets in frames]


def export_tracklets(tracker: Tracker, path, rig: CameraRig | None = None) -> int:
    """Write every observation as one JSON line; returns the record count."""
    rig = rig or tracker.rig
    stamps = rig.timestamps_ns()
    n = 0
    with open(path, "w") as fh:
        for tr in tracker.tracklets:
            for t in sorted(tr.observations):
                for k in sorted(tr.observations[t]):
                    rec = {"tracklet_id": tr.id, "timestamp_ns": int(stamps[t]),
                           "camera": k,
                           "keypoints": np.round(tr.observations[t][k], 6).tolist()}
                    fh.write(json.dumps(rec) + "\n")
                    n += 1
    return n
