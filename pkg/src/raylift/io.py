"""File formats: rig JSON plus line-delimited JSON for motion and detections."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .body_model import NUM_BETAS, NUM_JOINTS, MotionClip
from .geometry import SE3, CameraModel, CameraRig

RIG_VERSION = 1


class DataError(ValueError):
    """Missing, unreadable or inconsistent data files."""


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_lines(path):
    path = Path(path)
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        yield json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise DataError(f"{path}:{n}: invalid JSON ({exc.msg})") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc


def _matrix(value, what: str) -> np.ndarray:
    M = np.asarray(value, dtype=float)
    if M.size != 16:
        raise DataError(f"{what} must have 16 entries")
    return M.reshape(4, 4)


def frame_of(rig: CameraRig, timestamp_ns: int) -> int:
    return int(round((int(timestamp_ns) - rig.start_ns) * rig.rate_hz / 1e9))


# ---------------------------------------------------------------- rig

def write_rig(path, rig: CameraRig) -> None:
    cams = []
    for cam, ext in zip(rig.cameras, rig.extrinsics):
        cams.append({"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                     "width": cam.width, "height": cam.height,
                     "extrinsic": np.round(ext.matrix(), 12).tolist()})
    poses = [{"timestamp_ns": int(ts), "T_world_body": np.round(M, 12).tolist()}
             for ts, M in zip(rig.timestamps_ns(), rig.device_poses)]
    doc = {"version": RIG_VERSION, "rate_hz": rig.rate_hz, "start_ns": rig.start_ns,
           "cameras": cams, "poses": poses}
    Path(path).write_text(json.dumps(doc))


def read_rig(path) -> CameraRig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from exc
    if doc.get("version") != RIG_VERSION:
        raise DataError(f"{path}: unsupported rig version {doc.get('version')!r}")
    try:
        cams = [CameraModel(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"])
                for c in doc["cameras"]]
        extr = [SE3.from_matrix(_matrix(c["extrinsic"], "extrinsic")) for c in doc["cameras"]]
        stamps = np.array([p["timestamp_ns"] for p in doc["poses"]], dtype=np.int64)
        poses = np.stack([_matrix(p["T_world_body"], "pose") for p in doc["poses"]])
        rig = CameraRig(tuple(cams), tuple(extr), poses, float(doc["rate_hz"]),
                        int(doc.get("start_ns", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed rig ({exc})") from exc
    if np.any(np.diff(stamps) <= 0):
        raise DataError(f"{path}: pose timestamps must be strictly increasing")
    if not np.array_equal(stamps, rig.timestamps_ns()):
        raise DataError(f"{path}: poses must be sampled at rate_hz from start_ns")
    return rig


# ---------------------------------------------------------------- motion

def write_motion(path, clips, rig: CameraRig) -> int:
    """One record per frame per person; returns the record count."""
    rows = []
    for clip in clips:
        for i in range(len(clip)):
            t = clip.start + i
            rows.append((t, clip.person_id, {
                "person_id": int(clip.person_id),
                "timestamp_ns": int(rig.start_ns + round(t * 1e9 / rig.rate_hz)),
                "theta": np.round(clip.theta[i].reshape(-1), 10).tolist(),
                "beta": np.round(clip.beta[i], 10).tolist(),
                "omega": np.round(clip.omega[i], 10).tolist(),
                "tau": np.round(clip.tau[i], 10).tolist()}))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for _, _, rec in rows:
            fh.write(json.dumps(rec) + "\n")
    return len(rows)


def read_motion(path, rig: CameraRig, key: str = "person_id") -> dict:
    """``id -> (frames (N,), MotionClip)``.

    ``key`` selects the id field (``tracklet_id`` for tracker output); records
    without it fall back to ``person_id``.
    """
    per: dict = {}
    for rec in _read_lines(path):
        try:
            pid = int(rec.get(key, rec.get("person_id")))
            t = frame_of(rig, rec["timestamp_ns"])
            theta = np.asarray(rec["theta"], dtype=float).reshape(NUM_JOINTS, 6)
            beta = np.asarray(rec["beta"], dtype=float).reshape(NUM_BETAS)
            omega = np.asarray(rec["omega"], dtype=float).reshape(6)
            tau = np.asarray(rec["tau"], dtype=float).reshape(3)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed motion record ({exc})") from exc
        per.setdefault(pid, []).append((t, theta, beta, omega, tau))
    out = {}
    for pid, rows in per.items():
        rows.sort(key=lambda r: r[0])
        frames = np.array([r[0] for r in rows])
        if len(rows) < 2:
            continue
        clip = MotionClip(np.stack([r[1] for r in rows]), np.stack([r[2] for r in rows]),
                          np.stack([r[3] for r in rows]), np.stack([r[4] for r in rows]),
                          rig.rate_hz, pid, int(frames[0]))
        out[pid] = (frames, clip)
    return out


# ---------------------------------------------------------------- detections

def write_detections(path, dets, rig: CameraRig, with_ids: bool = True) -> int:
    """Detection records sorted by time then camera; returns the record count."""
    stamps = rig.timestamps_ns()
    n = 0
    with open(path, "w") as fh:
        for t in range(dets.num_frames):
            for k, kp, box, pid in sorted(dets.frame(t), key=lambda d: (d[0], d[3])):
                rec = {"timestamp_ns": int(stamps[t]), "camera": k}
                if with_ids:
                    rec["person_id"] = int(pid)
                rec["keypoints"] = np.round(kp, 6).tolist()
                rec["box"] = np.round(box, 6).tolist()
                fh.write(json.dumps(rec) + "\n")
                n += 1
    return n


def read_detections(path, rig: CameraRig) -> dict:
    """``frame -> [(camera, keypoints (17, 3), box (4,), person_id or None)]``."""
    out: dict = {}
    for rec in _read_lines(path):
        try:
            k = int(rec["camera"])
            kp = np.asarray(rec["keypoints"], dtype=float).reshape(17, 3)
            box = np.asarray(rec["box"], dtype=float).reshape(4)
            t = frame_of(rig, rec["timestamp_ns"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed detection record ({exc})") from exc
        if not 0 <= k < rig.num_cameras:
            raise DataError(f"{path}: camera {k} not in rig")
        if not rig.has_frame(t):
            raise DataError(f"{path}: timestamp {rec['timestamp_ns']} outside the rig poses")
        out.setdefault(t, []).append((k, kp, box, rec.get("person_id")))
    return out
