"""Optimisation loop, simulated batch stream and checkpoints."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..config import NetConfig, SimConfig, TrainConfig
from ..simulator import sample_training_window
from .loss import COMPONENTS, as_tensors, motion_loss
from .net import LampNet

CHECKPOINT_VERSION = 1
CURVE_FIELDS = ("step", "total", "smpl", "3d", "v", "vel")


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, parts: dict):
        self.step = step
        self.parts = parts
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        super().__init__(f"loss diverged at step {step} ({detail})")


class CheckpointError(ValueError):
    pass


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up followed by cosine decay to ``min_lr_ratio * lr``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    floor = cfg.min_lr_ratio * cfg.lr
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


def sample_index(seed: int, n: int, per_epoch: int) -> int:
    """Window index of the n-th sample: a fresh block per epoch, shuffled within."""
    epoch, pos = divmod(n, per_epoch)
    perm = np.random.default_rng([seed, 11, epoch]).permutation(per_epoch)
    return epoch * per_epoch + int(perm[pos])


def collate(pairs, dtype=torch.float32):
    rays = torch.as_tensor(np.stack([r for r, _ in pairs]), dtype=dtype)
    gts = [as_tensors(s, dtype) for _, s in pairs]
    gt = {k: torch.stack([g[k] for g in gts]) for k in gts[0]}
    return rays, gt


def simulated_stream(sim: SimConfig, train: TrainConfig, window: int,
                     layout: str = "quad_270") -> Callable[[int], tuple]:
    """``step -> (rays, gt)`` batches of augmented simulated windows."""
    def batch(step: int):
        n0 = step * train.batch_size
        pairs = [sample_training_window(sim, sample_index(train.seed, n0 + b,
                                                          train.windows_per_epoch),
                                        window, layout=layout)
                 for b in range(train.batch_size)]
        return collate(pairs)
    return batch


def fixed_stream(rays, gt_states, dtype=torch.float32) -> Callable[[int], tuple]:
    """The same single window at every step (overfitting checks)."""
    batch = collate([(rays, gt_states)], dtype)
    return lambda step: batch


@dataclass
class TrainState:
    net: LampNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    curve: list = field(default_factory=list)


def new_state(net_cfg: NetConfig, train_cfg: TrainConfig, dtype=torch.float32) -> TrainState:
    torch.manual_seed(train_cfg.seed)
    net = LampNet(net_cfg).to(dtype)
    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.lr)
    return TrainState(net, opt)


def train(state: TrainState, source: Callable[[int], tuple], cfg: TrainConfig,
          steps: int | None = None, checkpoint: Callable[[TrainState], None] | None = None,
          log: Callable[[dict], None] | None = None) -> TrainState:
    """Run optimisation steps from ``state.step`` up to ``steps`` (default ``cfg.steps``).

    Each completed step appends ``{step, total, smpl, 3d, v, vel}`` to
    ``state.curve``. A non-finite loss raises :class:`DivergenceError` before
    any parameter update, so the last checkpoint stays valid.
    """
    end = cfg.steps if steps is None else steps
    net, opt = state.net, state.optimizer
    net.train()
    while state.step < end:
        rays, gt = source(state.step)
        lr = learning_rate(state.step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        res = motion_loss(net(rays), gt, cfg.weights)
        vals = res.as_floats()
        if not all(math.isfinite(v) for v in vals.values()):
            raise DivergenceError(state.step, vals)
        res.total.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        opt.step()
        row = {"step": state.step, "total": vals["total"], "smpl": vals["smpl"],
               "3d": vals["joints3d"], "v": vals["vertices"], "vel": vals["velocity"]}
        state.curve.append(row)
        state.step += 1
        if log is not None:
            log(row)
        if checkpoint is not None and (state.step % cfg.checkpoint_every == 0 or state.step == end):
            checkpoint(state)
    return state


# ---------------------------------------------------------------- persistence

def save_checkpoint(path, state: TrainState, config: dict, config_hash: str) -> None:
    """Write parameters, optimiser moments and metadata to one ``.npz`` archive."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.net.state_dict().items()}
    opt = state.optimizer.state_dict()
    for i, s in opt["state"].items():
        for name, val in s.items():
            arrays[f"adam/{i}/{name}"] = torch.as_tensor(val).cpu().numpy()
    meta = {"version": CHECKPOINT_VERSION, "step": state.step, "config": config,
            "config_hash": config_hash, "dtype": str(state.net.token.weight.dtype),
            "param_groups": opt["param_groups"],
            "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def read_metadata(path) -> dict:
    try:
        with np.load(path) as data:
            return json.loads(bytes(data["__meta__"]).decode())
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc


def load_checkpoint(path, train_cfg: TrainConfig | None = None) -> tuple:
    """Restore ``(TrainState, metadata)`` from :func:`save_checkpoint` output."""
    meta = read_metadata(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    net_cfg = NetConfig.model_validate(meta["config"]["net"])
    dtype = torch.float64 if "float64" in meta["dtype"] else torch.float32
    net = LampNet(net_cfg).to(dtype)
    with np.load(path) as data:
        params = {k[len("param/"):]: torch.as_tensor(data[k]) for k in data.files
                  if k.startswith("param/")}
        try:
            net.load_state_dict(params)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: parameters do not match the config ({exc})") from exc
        lr = (train_cfg.lr if train_cfg else meta["param_groups"][0]["lr"])
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        moments: dict = {}
        for k in data.files:
            if k.startswith("adam/"):
                _, i, name = k.split("/")
                moments.setdefault(int(i), {})[name] = torch.as_tensor(data[k])
    opt.load_state_dict({"state": moments, "param_groups": meta["param_groups"]})
    return TrainState(net, opt, int(meta["step"])), meta


def write_curve(path, curve: list, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if not new else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        if new:
            w.writeheader()
        for row in curve:
            w.writerow({k: (repr(float(v)) if k != "step" else int(v)) for k, v in row.items()})


def read_curve(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def moving_average(values, width: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < width:
        return v.copy()
    return np.convolve(v, np.ones(width) / width, mode="valid")

