"""Cached acceptance training run, keyed by the config digest."""
from __future__ import annotations

import os
from pathlib import Path

from raylift.config import load_config
from raylift.pipeline import run_training

ROOT = Path(__file__).resolve().parent
CONFIG = ROOT / "data" / "acceptance.toml"
CACHE = Path(os.environ.get("RAYLIFT_CACHE", ROOT.parent / ".cache" / "acceptance"))


def acceptance_config():
    return load_config(CONFIG)


def trained_checkpoint() -> Path:
    """Train once (resuming any partial run) and return the checkpoint path."""
    cfg = acceptance_config()
    out = CACHE / cfg.digest()[:16]
    ckpt = out / "checkpoint.npz"
    done = out / "DONE"
    if not done.exists():
        run_training(cfg, out, resume=True)
        done.write_text(str(cfg.train.steps))
    return ckpt


if __name__ == "__main__":
    print(trained_checkpoint())
