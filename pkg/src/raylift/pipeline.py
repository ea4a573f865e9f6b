"""End-to-end runs shared by the command line and the acceptance suite."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .association import Tracker, hungarian
from .body_model import DEFAULT_SKELETON, BodyState, forward_kinematics
from .config import RunConfig
from .fitter.training import (CheckpointError, TrainState, load_checkpoint, new_state,
                              read_curve, save_checkpoint, simulated_stream, train,
                              write_curve)
from .geometry import CameraRig
from .inference import StreamRunner, network_predictor

LAYOUT_FOR_CAMERAS = {1: "mono", 2: "stereo", 4: "quad_270"}


def training_layout(cfg: RunConfig) -> str:
    try:
        return LAYOUT_FOR_CAMERAS[cfg.net.cameras]
    except KeyError:
        raise CheckpointError(f"no simulated rig layout with {cfg.net.cameras} cameras") from None


def run_training(cfg: RunConfig, out_dir, log=None, resume: bool = True) -> TrainState:
    """Train (or resume) into ``out_dir``: checkpoint.npz, loss.csv, config.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, curve_path = out / "checkpoint.npz", out / "loss.csv"
    digest = cfg.digest()
    if resume and ckpt.exists():
        state, meta = load_checkpoint(ckpt, cfg.train)
        if meta["config_hash"] != digest:
            raise CheckpointError(f"{ckpt} was written for a different config")
        state.curve = read_curve(curve_path)[:state.step] if curve_path.exists() else []
    else:
        state = new_state(cfg.net, cfg.train)
    (out / "config.json").write_text(json.dumps(cfg.model_dump(mode="json"), indent=2))
    source = simulated_stream(cfg.sim, cfg.train, cfg.net.window, training_layout(cfg))

    def checkpoint(st: TrainState) -> None:
        save_checkpoint(ckpt, st, cfg.model_dump(mode="json"), digest)
        write_curve(curve_path, st.curve)

    return train(state, source, cfg.train, checkpoint=checkpoint, log=log)


def load_network(path):
    state, meta = load_checkpoint(path)
    state.net.eval()
    return state.net, meta


def track_and_fit(net, rig: CameraRig, frames, cfg: RunConfig, latency: int | None = None):
    """Associate per-frame detections and run windowed inference per tracklet.

    ``frames`` yields ``(t, detections)`` with detections as
    ``(camera, keypoints, box, ...)``. Returns ``(tracker, emissions)`` where
    emissions are ``(tracklet_id, Emission)`` pairs.
    """
    latency = cfg.infer.latency_frames if latency is None else latency
    if rig.num_cameras != net.cfg.cameras:
        raise CheckpointError(f"network expects {net.cfg.cameras} cameras, rig has "
                              f"{rig.num_cameras}")
    tracker = Tracker(rig, cfg.track)
    predictor = network_predictor(net, rig)
    runner = StreamRunner(rig, lambda tid: predictor, net.cfg.window, latency)
    K = rig.num_cameras
    with torch.no_grad():
        for t, dets in frames:
            dets = list(dets)
            matches = tracker.step(t, dets)
            obs: dict = {}
            for tid, i in matches:
                k, kp = dets[i][0], dets[i][1]
                obs.setdefault(tid, np.zeros((K, 17, 3)))[k] = kp
            runner.push(t, obs)
        runner.finalize()
    return tracker, runner.emitted


def emissions_to_joints(emissions) -> dict:
    """``tracklet_id -> (frames (N,), joints (N, 23, 3))`` sorted by frame."""
    by_tid: dict = {}
    for tid, em in emissions:
        by_tid.setdefault(tid, []).append(em)
    out = {}
    for tid, ems in by_tid.items():
        ems.sort(key=lambda e: e.frame)
        states = [e.state for e in ems]
        batch = BodyState(np.stack([s.theta for s in states]), np.stack([s.beta for s in states]),
                          np.stack([s.omega for s in states]), np.stack([s.tau for s in states]))
        joints, _ = forward_kinematics(DEFAULT_SKELETON, batch)
        out[tid] = (np.array([e.frame for e in ems]), joints)
    return out


def clip_joint_tracks(clips) -> dict:
    """``person_id -> (frames, joints)`` for ground-truth motion clips."""
    out = {}
    for clip in clips:
        joints, _ = forward_kinematics(DEFAULT_SKELETON, clip.states())
        out[clip.person_id] = (clip.start + np.arange(len(clip)), joints)
    return out


def _by_frame(tracks: dict, keep=None) -> dict:
    per: dict = {}
    for key, (frames, joints) in tracks.items():
        for f, j in zip(frames, joints):
            if keep is None or keep(int(key), int(f)):
                per.setdefault(int(f), []).append((key, j))
    return per


def match_tracks(pred: dict, gt: dict, keep=None) -> dict:
    """Per-frame Hungarian matching of predicted to true pelvis positions.

    Returns ``frame -> [(gt_id, pred_id)]``. ``keep(gt_id, frame)`` can
    restrict which ground-truth person-frames are evaluated.
    """
    gt_f, pred_f = _by_frame(gt, keep), _by_frame(pred)
    out = {}
    for f, gts in gt_f.items():
        preds = pred_f.get(f, [])
        if not preds:
            out[f] = []
            continue
        cost = np.array([[np.linalg.norm(g[1][0] - p[1][0]) for p in preds] for g in gts])
        out[f] = [(gts[a][0], preds[b][0]) for a, b in hungarian(cost).pairs]
    return out


def evaluate_tracks(pred: dict, gt: dict, cfg: RunConfig, rate_hz: float, keep=None):
    """Metrics over matched (person, tracklet) segments plus per-frame coverage.

    Returns ``(report, traces, coverage)``: ``traces`` holds frame-indexed
    root errors; ``coverage`` is the per-timestamp share of evaluated people
    with a predicted pelvis within the recall threshold.
    """
    ev = cfg.eval
    matches = match_tracks(pred, gt, keep)
    pred_lookup = {tid: dict(zip(map(int, fr), js)) for tid, (fr, js) in pred.items()}
    gt_lookup = {pid: dict(zip(map(int, fr), js)) for pid, (fr, js) in gt.items()}
    segments: dict = {}
    for f in sorted(matches):
        for pid, tid in matches[f]:
            segments.setdefault((pid, tid), []).append(f)
    reports, rows = [], []
    for (pid, tid), frames in segments.items():
        runs = np.split(np.array(frames), np.nonzero(np.diff(frames) != 1)[0] + 1)
        for run in runs:
            if len(run) < 2:
                continue
            p = np.stack([pred_lookup[tid][f] for f in run])
            g = np.stack([gt_lookup[pid][f] for f in run])
            rep = metrics.evaluate_sequence(p, g, rate_hz, ev.sim3_window_frames,
                                            ev.foot_contact_height_m, ev.recall_threshold_m)
            reports.append(rep)
            for f, e in zip(run, rep.traces["root_error_m"]):
                rows.append((int(f), int(pid), int(tid), float(e)))
    report = metrics.combine(reports)
    gt_pel = {f: np.array([j[0] for _, j in v]) for f, v in _by_frame(gt, keep).items()}
    pred_pel = {f: np.array([j[0] for _, j in v]) for f, v in _by_frame(pred).items()}
    report.recall_3d = metrics.tracking_recall(pred_pel, gt_pel, ev.recall_threshold_m)
    coverage = metrics.coverage_per_timestamp(pred_pel, gt_pel, ev.recall_threshold_m)
    return report, sorted(rows), coverage


def keypoints_by_person(detections: dict, num_frames: int, num_cameras: int) -> dict:
    """Dense ``person_id -> (T, K, 17, 3)`` from ``frame -> [(camera, kp, box, pid)]``."""
    out: dict = {}
    for t, dets in detections.items():
        for k, kp, _box, pid in dets:
            if pid is None:
                continue
            out.setdefault(int(pid), np.zeros((num_frames, num_cameras, 17, 3)))[t, k] = kp
    return out


def fit_known_people(net, rig: CameraRig, keypoints: dict, latency: int) -> dict:
    """Windowed inference with ground-truth association.

    ``keypoints`` maps a person id to dense (T, K, 17, 3) observations. Each
    person is streamed from its first to its last observed frame. Returns
    ``person_id -> (frames, joints)`` like :func:`emissions_to_joints`.
    """
    predictor = network_predictor(net, rig)
    runner = StreamRunner(rig, lambda pid: predictor, net.cfg.window, latency)
    seen = {pid: np.nonzero((kp[..., 2] > 0).any(axis=(1, 2)))[0]
            for pid, kp in keypoints.items()}
    with torch.no_grad():
        for t in range(rig.num_frames):
            obs = {pid: kp[t] for pid, kp in keypoints.items()
                   if len(seen[pid]) and seen[pid][0] <= t <= seen[pid][-1]}
            runner.push(t, obs)
        runner.finalize()
    return emissions_to_joints(runner.emitted)
