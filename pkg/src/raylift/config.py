"""Validated configuration documents.

Every model forbids unknown keys so a typo in a config file fails loudly
instead of silently falling back to a default.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NoiseConfig(_Strict):
    correlated_sigma_px: float = Field(3.0, ge=0)
    correlation_halflife_frames: float = Field(15.0, gt=0)
    perframe_sigma_px: float = Field(1.0, ge=0)
    distal_multiplier: float = Field(1.5, ge=1)


class MaskConfig(_Strict):
    span_frames: Tuple[int, int] = (10, 20)
    joints_per_burst: Tuple[int, int] = (1, 4)
    bursts_per_view: Tuple[int, int] = (0, 2)
    view_dropout: bool = True
    force_mono_prob: float = Field(0.25, ge=0, le=1)
    feet_bias: float = Field(0.2, ge=0, le=1)
    clean_clip_prob: float = Field(0.3, ge=0, le=1)

    @model_validator(mode="after")
    def _ranges(self):
        for name in ("span_frames", "joints_per_burst", "bursts_per_view"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-empty range")
        if self.joints_per_burst[1] > 17:
            raise ValueError("at most 17 joints per burst")
        return self


class PoseNoiseConfig(_Strict):
    trans_sigma_m: float = Field(0.0, ge=0)
    rot_sigma_deg: float = Field(0.0, ge=0)
    resample_interval_s: float = Field(10.0, gt=0)


class SimConfig(_Strict):
    seed: int = 0
    num_people: int = Field(1, ge=0)
    duration_s: float = Field(10.0, gt=0)
    rate_hz: float = Field(30.0, gt=0)
    rig_layout: Literal["mono", "stereo", "quad_270"] = "quad_270"
    noise: NoiseConfig = NoiseConfig()
    masking: MaskConfig = MaskConfig()
    pose_noise: PoseNoiseConfig = PoseNoiseConfig()
    apply_noise: bool = False
    apply_masking: bool = False
    min_distance_m: float = Field(1.5, gt=0)
    max_distance_m: float = Field(6.0, gt=0)
    wearer_speed_max: float = Field(0.8, ge=0)
    window: int = Field(30, ge=2)

    @model_validator(mode="after")
    def _long_enough(self):
        if self.num_frames < self.window:
            raise ValueError("duration_s * rate_hz must cover at least one window")
        if self.max_distance_m <= self.min_distance_m:
            raise ValueError("max_distance_m must exceed min_distance_m")
        return self

    @property
    def num_frames(self) -> int:
        return int(round(self.duration_s * self.rate_hz))


class NetConfig(_Strict):
    blocks: int = Field(3, ge=1)
    dim: int = Field(64, ge=1)
    heads: int = Field(2, ge=1)
    window: int = Field(30, ge=2)
    cameras: int = Field(4, ge=1)
    joints: Literal[17] = 17
    ffn_mult: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _heads(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        return self


class LossWeights(_Strict):
    smpl: float = Field(1.0, ge=0)
    joints3d: float = Field(5.0, ge=0)
    vertices: float = Field(1.0, ge=0)
    velocity: float = Field(20.0, ge=0)


class TrainConfig(_Strict):
    seed: int = 0
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    min_lr_ratio: float = Field(0.05, ge=0, le=1)
    warmup_steps: int = Field(100, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    windows_per_epoch: int = Field(4096, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    weights: LossWeights = LossWeights()


class TrackConfig(_Strict):
    iou_gate: float = Field(0.3, gt=0, le=1)
    timeout_s: float = Field(2.0, gt=0)
    bootstrap_depth_m: float = Field(3.0, gt=0)
    min_box_px: float = Field(20.0, ge=0)
    box_dilation: float = Field(0.1, ge=0)
    min_spawn_keypoints: int = Field(3, ge=1, le=17)


class InferConfig(_Strict):
    latency_frames: int = Field(29, ge=0)


class EvalConfig(_Strict):
    alignments: Tuple[str, ...] = ("pelvis", "procrustes", "sim3_window", "none")
    sim3_window_frames: int = Field(100, ge=1)
    recall_threshold_m: float = Field(0.25, gt=0)
    visibility_iou: float = Field(0.4, ge=0, le=1)
    foot_contact_height_m: float = Field(0.05, gt=0)


class IOConfig(_Strict):
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    detections: Optional[str] = None
    rig: Optional[str] = None
    pred: Optional[str] = None
    gt: Optional[str] = None


class RunConfig(_Strict):
    version: Literal[1]
    sim: SimConfig = SimConfig()
    net: NetConfig = NetConfig()
    train: TrainConfig = TrainConfig()
    track: TrackConfig = TrackConfig()
    infer: InferConfig = InferConfig()
    eval: EvalConfig = EvalConfig()
    io: IOConfig = IOConfig()

    @model_validator(mode="after")
    def _consistent(self):
        if self.infer.latency_frames > self.net.window - 1:
            raise ValueError("infer.latency_frames must be at most net.window - 1")
        return self

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        data = self.model_dump()
        data["sim"]["seed"] = seed
        data["train"]["seed"] = seed
        return RunConfig.model_validate(data)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        if path.suffix == ".toml":
            import tomli
            data = tomli.loads(text)
        else:
            data = json.loads(text)
    except Exception as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
    if not isinstance(data, dict) or "version" not in data:
        raise ConfigError(f"{path}: missing mandatory 'version' field")
    return parse_config(data)
