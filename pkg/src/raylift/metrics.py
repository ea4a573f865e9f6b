"""Evaluation metrics: MPJPE family, trajectory error, jitter, foot skating, recall.

Positions are metres in, millimetres out for every MPJPE variant and foot
skating. Joint arrays are (T, J, 3); the pelvis is joint 0.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .body_model import J

ALIGNMENTS = ("none", "pelvis", "procrustes", "sim3_window")
FOOT_JOINTS = (J["left_foot"], J["right_foot"])
REPORT_COLUMNS = ("mpjpe_mm", "pa_mpjpe_mm", "wa_mpjpe100_mm", "w_mpjpe_mm",
                  "rte_percent", "jitter_10m_s3", "fs_mm", "recall_3d")


class MetricError(ValueError):
    """Rejected input or an undefined metric."""


class DegenerateAlignment(MetricError):
    pass


def _umeyama(src, dst, with_scale=True, check=True):
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    if check and (S[0] <= 1e-12 or S[1] <= 1e-9 * S[0]):
        raise DegenerateAlignment("point sets are (near) collinear")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = (xs ** 2).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def procrustes(src, dst, with_scale: bool = True):
    """Similarity ``(s, R, t)`` minimising ``sum |s R src_i + t - dst_i|^2``."""
    src = np.asarray(src, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or len(src) < 3 or np.shape(dst) != src.shape:
        raise MetricError("procrustes needs two matching (N>=3, 3) point sets")
    return _umeyama(src, dst, with_scale)


def _apply(s, R, t, pts):
    return s * pts @ R.T + t


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def aligned(pred, gt, align: str, window_frames: int = 100) -> np.ndarray:
    """Predictions after the requested alignment onto the ground truth."""
    pred, gt = _check_pair(pred, gt)
    if align == "none":
        return pred.copy()
    if align == "pelvis":
        return pred - pred[:, :1] + gt[:, :1]
    if align == "procrustes":
        out = np.empty_like(pred)
        for i in range(len(pred)):
            out[i] = _apply(*_umeyama(pred[i], gt[i], check=False), pred[i])
        return out
    if align == "sim3_window":
        out = np.empty_like(pred)
        for a in range(0, len(pred), window_frames):
            chunk = slice(a, a + window_frames)
            p, g = pred[chunk].reshape(-1, 3), gt[chunk].reshape(-1, 3)
            out[chunk] = _apply(*_umeyama(p, g, check=False), p).reshape(pred[chunk].shape)
        return out
    raise MetricError(f"unknown alignment {align!r}")


def per_frame_error(pred, gt, align: str = "none", window_frames: int = 100) -> np.ndarray:
    """Mean joint error per frame in millimetres."""
    pred, gt = _check_pair(pred, gt)
    al = aligned(pred, gt, align, window_frames)
    return 1000.0 * np.linalg.norm(al - gt, axis=-1).mean(axis=-1)


def mpjpe(pred, gt, align: str = "pelvis", window_frames: int = 100) -> float:
    """Mean per-joint position error (mm) after ``align``."""
    return float(per_frame_error(pred, gt, align, window_frames).mean())


def rte(pred_root, gt_root) -> float:
    """Root trajectory error in percent of the ground-truth path length.

    The whole predicted trajectory is rigidly aligned (no scale) to the
    ground truth first; the mean remaining error is divided by the path
    length.
    """
    pred_root = np.asarray(pred_root, dtype=float)
    gt_root = np.asarray(gt_root, dtype=float)
    if pred_root.shape != gt_root.shape or len(gt_root) < 2:
        raise MetricError("rte needs two equal trajectories of at least two frames")
    length = np.linalg.norm(np.diff(gt_root, axis=0), axis=1).sum()
    if length <= 1e-9:
        raise MetricError("ground-truth path length is zero")
    s, R, t = _umeyama(pred_root, gt_root, with_scale=False, check=False)
    err = np.linalg.norm(_apply(s, R, t, pred_root) - gt_root, axis=1).mean()
    return float(100.0 * err / length)


def jitter(joints, rate_hz: float) -> float:
    """Mean third time-derivative magnitude, in units of 10 m/s^3."""
    joints = np.asarray(joints, dtype=float)
    if joints.ndim != 3 or len(joints) < 4:
        raise MetricError("jitter needs at least four frames of (J, 3) joints")
    jerk = np.diff(joints, n=3, axis=0) * rate_hz ** 3
    return float(np.linalg.norm(jerk, axis=-1).mean() / 10.0)


def foot_skating(joints, rate_hz: float = 30.0, contact_height: float = 0.05,
                 feet=FOOT_JOINTS) -> float:
    """Height-weighted horizontal foot slide during ground contact (mm per frame).

    A foot is in contact between two frames when both heights are below
    ``contact_height``. Each contact step contributes its horizontal
    displacement times ``exp(1 - h / contact_height)`` with ``h`` the larger of
    the two heights (clamped at zero); the result is the mean over contact steps.
    ``rate_hz`` is accepted for interface symmetry; displacements are per frame.
    """
    joints = np.asarray(joints, dtype=float)
    if len(joints) < 2:
        return 0.0
    feet_xyz = joints[:, list(feet)]                       # (T, F, 3)
    h = np.maximum(feet_xyz[..., 2], 0.0)
    pair_h = np.maximum(h[1:], h[:-1])
    contact = pair_h < contact_height
    if not contact.any():
        return 0.0
    slide = np.linalg.norm(np.diff(feet_xyz[..., :2], axis=0), axis=-1)
    weight = np.exp(1.0 - pair_h / contact_height)
    return float(1000.0 * (slide * weight)[contact].mean())


def tracking_recall(pred: dict, gt: dict, threshold_m: float = 0.25) -> float:
    """Share of ground-truth person-frames with any predicted pelvis closer than the threshold.

    ``pred`` and ``gt`` map a frame index to an (N, 3) array of pelvis
    positions; identities are ignored.
    """
    if threshold_m <= 0:
        raise MetricError("threshold must be positive")
    hit = total = 0
    for t, g in gt.items():
        g = np.asarray(g, dtype=float).reshape(-1, 3)
        total += len(g)
        p = np.asarray(pred.get(t, np.zeros((0, 3))), dtype=float).reshape(-1, 3)
        if len(g) and len(p):
            d = np.linalg.norm(g[:, None] - p[None], axis=-1).min(axis=1)
            hit += int((d < threshold_m).sum())
    return hit / total if total else 0.0


def coverage_per_timestamp(pred: dict, gt: dict, threshold_m: float = 0.25) -> np.ndarray:
    """Per-frame share of ground-truth people tracked (frames with people only)."""
    return np.array([tracking_recall({t: pred.get(t, np.zeros((0, 3)))}, {t: g}, threshold_m)
                     for t, g in sorted(gt.items()) if len(np.reshape(g, (-1, 3)))])


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def visibility_filter(gt_boxes, detection_boxes, iou_threshold: float = 0.4) -> np.ndarray:
    """Frames where some detection overlaps a projected ground-truth box enough.

    Both arguments are per-frame sequences of box lists ``[x0, y0, x1, y1]``.
    """
    keep = np.zeros(len(gt_boxes), dtype=bool)
    for t, (gts, dets) in enumerate(zip(gt_boxes, detection_boxes)):
        keep[t] = any(box_iou(g, d) >= iou_threshold for g in gts for d in dets)
    return keep


@dataclass
class MetricsReport:
    mpjpe_mm: float = 0.0
    pa_mpjpe_mm: float = 0.0
    wa_mpjpe100_mm: float = 0.0
    w_mpjpe_mm: float = 0.0
    rte_percent: float = 0.0
    jitter_10m_s3: float = 0.0
    fs_mm: float = 0.0
    recall_3d: float = 0.0
    frames: int = 0
    traces: dict = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("traces")
        return d


def evaluate_sequence(pred, gt, rate_hz: float = 30.0, window_frames: int = 100,
                      contact_height: float = 0.05, recall_threshold: float = 0.25
                      ) -> MetricsReport:
    """All metrics for one predicted joint sequence against its ground truth."""
    pred, gt = _check_pair(pred, gt)
    errs = {a: per_frame_error(pred, gt, a, window_frames) for a in ALIGNMENTS}
    root_err = np.linalg.norm(pred[:, 0] - gt[:, 0], axis=-1)
    moved = np.linalg.norm(np.diff(gt[:, 0], axis=0), axis=1).sum() > 1e-9
    return MetricsReport(
        mpjpe_mm=float(errs["pelvis"].mean()),
        pa_mpjpe_mm=float(errs["procrustes"].mean()),
        wa_mpjpe100_mm=float(errs["sim3_window"].mean()),
        w_mpjpe_mm=float(errs["none"].mean()),
        rte_percent=rte(pred[:, 0], gt[:, 0]) if moved else 0.0,
        jitter_10m_s3=jitter(pred, rate_hz) if len(pred) >= 4 else 0.0,
        fs_mm=foot_skating(pred, rate_hz, contact_height),
        recall_3d=float((root_err < recall_threshold).mean()),
        frames=len(pred),
        traces={"root_error_m": root_err, "w_mpjpe_mm": errs["none"]},
    )


def combine(reports: list) -> MetricsReport:
    """Frame-weighted mean of several reports."""
    reports = [r for r in reports if r.frames]
    if not reports:
        return MetricsReport()
    w = np.array([r.frames for r in reports], dtype=float)
    vals = {k: float(np.average([getattr(r, k) for r in reports], weights=w))
            for k in REPORT_COLUMNS}
    return MetricsReport(**vals, frames=int(w.sum()))


def write_report_csv(path, rows: list) -> None:
    """``rows``: dicts with optional method/dataset/config labels and report columns."""
    fields = ["method", "dataset", "config", *REPORT_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
