"""Command-line entry point: ``raylift {simulate,train,track,eval,plot}``.

Every command loads and validates its configuration and inputs before it
creates or writes anything under ``--out``. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io, pipeline, plots
from .association import export_tracklets
from .config import ConfigError, RunConfig, load_config
from .fitter.training import CheckpointError, DivergenceError, read_metadata
from .inference import write_stream
from .metrics import MetricError, write_report_csv
from .simulator import apply_pose_noise, simulate_scene

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("raylift")


def _config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _input(value, fallback, what: str) -> Path:
    path = value or fallback
    if path is None:
        raise ConfigError(f"no {what} given (flag or io section)")
    path = Path(path)
    if not path.exists():
        raise io.DataError(f"{what} not found: {path}")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise io.DataError(f"{out}: {exc.strerror}") from exc
    return out


def _manifest(out: Path, command: str, cfg: RunConfig | None, files, **extra) -> dict:
    doc = {"command": command}
    if cfg is not None:
        doc["seed"] = cfg.sim.seed if command == "simulate" else cfg.train.seed
        doc["config_hash"] = cfg.digest()
    doc.update(extra)
    doc["files"] = {Path(f).name: io.file_sha256(f) for f in files}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    scene = simulate_scene(cfg.sim)
    observed = apply_pose_noise(scene.rig, cfg.sim.pose_noise, cfg.sim.seed)
    files = [out / "rig.json", out / "rig_observed.json", out / "motion.jsonl",
             out / "detections.jsonl", out / "config.json"]
    io.write_rig(files[0], scene.rig)
    io.write_rig(files[1], observed)
    io.write_motion(files[2], scene.people, scene.rig)
    n = io.write_detections(files[3], scene.detections, scene.rig)
    files[4].write_text(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
    _manifest(out, "simulate", cfg, files, frames=scene.rig.num_frames,
              cameras=scene.rig.num_cameras, detections=n)
    log.info("simulated %d frames, %d detections into %s", scene.rig.num_frames, n, out)
    return EXIT_OK


def _validation_error(net, dataset: Path, cfg: RunConfig) -> float | None:
    """World-frame joint error (mm) on the dataset scene with known identities."""
    rig = io.read_rig(dataset / "rig.json")
    if rig.num_cameras != net.cfg.cameras:
        return None
    kps = pipeline.keypoints_by_person(io.read_detections(dataset / "detections.jsonl", rig),
                                       rig.num_frames, rig.num_cameras)
    gt = {pid: (frames, clip) for pid, (frames, clip) in
          io.read_motion(dataset / "motion.jsonl", rig).items()}
    gt_tracks = pipeline.clip_joint_tracks([clip for _, clip in gt.values()])
    pred = pipeline.fit_known_people(net, rig, kps, cfg.infer.latency_frames)
    errs = []
    for pid, (frames, joints) in pred.items():
        g_frames, g_joints = gt_tracks[pid]
        idx = np.searchsorted(g_frames, frames)
        errs.append(np.linalg.norm(joints - g_joints[idx], axis=-1).mean(axis=-1))
    return float(1000 * np.concatenate(errs).mean()) if errs else None


def cmd_train(args) -> int:
    cfg = _config(args)
    dataset = _input(args.dataset, cfg.io.dataset, "dataset")
    if not (dataset / "manifest.json").exists():
        raise io.DataError(f"{dataset} is not a simulated dataset (no manifest.json)")
    pipeline.training_layout(cfg)
    out = _out_dir(args.out)

    def progress(row):
        if row["step"] % 100 == 0:
            log.info("step %d loss %.5f", row["step"], row["total"])

    state = pipeline.run_training(cfg, out, log=progress, resume=not args.fresh)
    state.net.eval()
    val = _validation_error(state.net, dataset, cfg)
    (out / "validation.json").write_text(json.dumps({"w_mpjpe_mm": val}) + "\n")
    _manifest(out, "train", cfg,
              [out / "checkpoint.npz", out / "loss.csv", out / "config.json",
               out / "validation.json"],
              steps=state.step, dataset=io.file_sha256(dataset / "manifest.json"))
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _config(args)
    ckpt = _input(args.checkpoint, cfg.io.checkpoint, "checkpoint")
    det_path = _input(args.detections, cfg.io.detections, "detections")
    rig_path = _input(args.rig, cfg.io.rig, "rig")
    meta = read_metadata(ckpt)
    if meta["config"]["net"] != cfg.net.model_dump(mode="json"):
        raise ConfigError("net section differs from the checkpoint's configuration")
    rig = io.read_rig(rig_path)
    if rig.num_cameras != cfg.net.cameras:
        raise ConfigError(f"rig has {rig.num_cameras} cameras, net expects {cfg.net.cameras}")
    detections = io.read_detections(det_path, rig)
    net, _ = pipeline.load_network(ckpt)
    out = _out_dir(args.out)
    frames = ((t, detections.get(t, [])) for t in range(rig.num_frames))
    tracker, emissions = pipeline.track_and_fit(net, rig, frames, cfg)
    files = [out / "tracklets.jsonl", out / "motion.jsonl"]
    export_tracklets(tracker, files[0], rig)
    write_stream(files[1], emissions, rig)
    _manifest(out, "track", cfg, files, tracklets=len(tracker.tracklets),
              checkpoint=io.file_sha256(ckpt))
    log.info("%d tracklets, %d emitted frames", len(tracker.tracklets), len(emissions))
    return EXIT_OK


def _visible(detections: dict):
    seen = {(int(pid), t) for t, dets in detections.items() for *_, pid in dets
            if pid is not None}
    return lambda pid, t: (int(pid), t) in seen


def cmd_eval(args) -> int:
    cfg = _config(args)
    preds = [_input(p, None, "prediction") for p in (args.pred or [cfg.io.pred])]
    labels = args.label or [p.parent.name or p.stem for p in preds]
    if len(labels) != len(preds):
        raise ConfigError("give one --label per --pred")
    gt_path = _input(args.gt, cfg.io.gt, "ground truth")
    rig = io.read_rig(_input(args.rig, cfg.io.rig, "rig"))
    keep = None
    if args.detections:
        keep = _visible(io.read_detections(_input(args.detections, None, "detections"), rig))
    gt = pipeline.clip_joint_tracks([c for _, c in io.read_motion(gt_path, rig).values()])
    runs = []
    for label, path in zip(labels, preds):
        clips = io.read_motion(path, rig, key="tracklet_id")
        pred = {tid: (frames, pipeline.clip_joint_tracks([clip])[tid][1])
                for tid, (frames, clip) in clips.items()}
        gt_frames = {int(f) for fr, _ in gt.values() for f in fr}
        if pred and not gt_frames & {int(f) for fr, _ in pred.values() for f in fr}:
            raise io.DataError(f"{path} shares no timestamps with {gt_path}")
        runs.append((label, *pipeline.evaluate_tracks(pred, gt, cfg, rig.rate_hz, keep)))
    out = _out_dir(args.out)
    rows = [{"method": label, "dataset": gt_path.parent.name or gt_path.stem,
             "config": cfg.digest()[:12], **report.row()} for label, report, _, _ in runs]
    write_report_csv(out / "metrics.csv", rows)
    plots.write_traces(out / "traces.csv",
                       [(label, *r) for label, _, traces, _ in runs for r in traces])
    plots.write_coverage(out / "coverage.csv", {label: cov for label, _, _, cov in runs})
    svgs = plots.render(out, rig.rate_hz)
    _manifest(out, "eval", cfg, [out / "metrics.csv", out / "traces.csv",
                                 out / "coverage.csv", *svgs])
    for row in rows:
        log.info("%s: W-MPJPE %.1f mm, recall %.3f", row["method"], row["w_mpjpe_mm"],
                 row["recall_3d"])
    return EXIT_OK


def cmd_plot(args) -> int:
    rate = _config(args).sim.rate_hz if args.config else 30.0
    src = Path(args.input or args.out)
    if not (src / "traces.csv").exists() and not (src / "coverage.csv").exists():
        raise io.DataError(f"{src} has neither traces.csv nor coverage.csv")
    out = _out_dir(args.out)
    if out.resolve() != src.resolve():
        for name in ("traces.csv", "coverage.csv"):
            if (src / name).exists():
                (out / name).write_bytes((src / name).read_bytes())
    plots.render(out, rate)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="override sim.seed and train.seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="raylift", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a simulated dataset")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train or resume a network")
    p.add_argument("--dataset", type=Path, help="directory written by `simulate`")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common], help="associate and fit detections")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--detections", type=Path)
    p.add_argument("--rig", type=Path)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="metrics, traces and plots")
    p.add_argument("--pred", type=Path, action="append", help="tracked motion (repeatable)")
    p.add_argument("--label", action="append", help="name for each --pred")
    p.add_argument("--gt", type=Path)
    p.add_argument("--rig", type=Path)
    p.add_argument("--detections", type=Path,
                   help="restrict evaluation to person-frames with a detection")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", parents=[common], help="redraw SVGs from eval CSVs")
    p.add_argument("--input", type=Path, help="eval directory (default: --out)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.DataError, MetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
