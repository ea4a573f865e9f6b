"""Spatio-temporal transformer from ray clouds to per-frame body parameters.

Every (camera, keypoint) cell of every frame becomes a token. Encoder blocks
alternate attention across the cells of one frame with attention along time
for one cell. Per-frame readout queries cross-attend to the encoder output
after every block and are decoded into pose, shape, root rotation and root
translation in the window's local frame.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from ..body_model import IDENTITY_6D, NUM_BETAS, NUM_JOINTS, BodyState, transform_states
from ..config import NetConfig
from ..geometry import RayCloud

RAY_DIM = 7
OUT_DIM = NUM_JOINTS * 6 + NUM_BETAS + 6 + 3
TAU_SCALE = 4.0          # metres per unit of the zero-initialised translation head
_MASKED = -1e4


class InputError(ValueError):
    """Rejected input: wrong shapes or mismatched lengths."""


def sinusoid_table(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(dim, dtype=torch.float64)[None]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / dim)
    return torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))


def rot6d_to_matrix_t(r: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Differentiable Gram-Schmidt map (..., 6) -> (..., 3, 3), total on any input."""
    a1, a2 = r[..., :3], r[..., 3:]
    b1 = a1 / torch.sqrt((a1 * a1).sum(-1, keepdim=True) + eps)
    w = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = w / torch.sqrt((w * w).sum(-1, keepdim=True) + eps)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


class Attention(nn.Module):
    """Multi-head attention with an additive key mask."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, ctx, key_bias=None):
        # x: (B, Nq, D), ctx: (B, Nk, D), key_bias: (B, Nk) with 0 or a large negative
        B, Nq, D = x.shape
        h = self.heads
        q = self.q(x).view(B, Nq, h, D // h).transpose(1, 2)
        k = self.k(ctx).view(B, -1, h, D // h).transpose(1, 2)
        v = self.v(ctx).view(B, -1, h, D // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        if key_bias is not None:
            logits = logits + key_bias[:, None, None, :]
        att = torch.softmax(logits, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, Nq, D)
        return self.out(y)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int):
        super().__init__(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))


class Block(nn.Module):
    """One encoder stage (spatial + temporal) and its decoder stage."""

    def __init__(self, dim: int, heads: int, mult: int):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim)
        self.spatial = Attention(dim, heads)
        self.norm_t = nn.LayerNorm(dim)
        self.temporal = Attention(dim, heads)
        self.norm_f = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, mult)
        self.norm_qs = nn.LayerNorm(dim)
        self.query_self = Attention(dim, heads)
        self.norm_qc = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross = Attention(dim, heads)
        self.norm_qf = nn.LayerNorm(dim)
        self.query_ffn = FeedForward(dim, mult)

    def forward(self, tokens, queries, bias):
        B, T, C, D = tokens.shape                      # C = cameras * joints
        x = tokens.reshape(B * T, C, D)
        xn = self.norm_s(x)
        x = x + self.spatial(xn, xn, bias.reshape(B * T, C))
        x = x.view(B, T, C, D).transpose(1, 2).reshape(B * C, T, D)
        xn = self.norm_t(x)
        x = x + self.temporal(xn, xn, bias.transpose(1, 2).reshape(B * C, T))
        x = x.view(B, C, T, D).transpose(1, 2)
        x = x + self.ffn(self.norm_f(x))

        qn = self.norm_qs(queries)
        queries = queries + self.query_self(qn, qn)
        memory = self.norm_kv(x.reshape(B, T * C, D))
        queries = queries + self.cross(self.norm_qc(queries), memory, bias.reshape(B, T * C))
        queries = queries + self.query_ffn(self.norm_qf(queries))
        return x, queries


class LampNet(nn.Module):
    """Ray-cloud window (B, T, K, 17, 7) to per-frame body parameters."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        self.token = nn.Linear(RAY_DIM, D)
        self.camera_embed = nn.Parameter(0.02 * torch.randn(cfg.cameras, D))
        self.joint_embed = nn.Parameter(0.02 * torch.randn(cfg.joints, D))
        self.readout = nn.Parameter(0.02 * torch.randn(D))
        self.register_buffer("time_table", sinusoid_table(cfg.window, D).float())
        self.blocks = nn.ModuleList(Block(D, cfg.heads, cfg.ffn_mult) for _ in range(cfg.blocks))
        self.norm_out = nn.LayerNorm(D)
        self.head = nn.Linear(D, OUT_DIM)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        offset = np.concatenate([np.tile(IDENTITY_6D, NUM_JOINTS), np.zeros(NUM_BETAS),
                                 IDENTITY_6D, np.zeros(3)])
        self.register_buffer("out_offset", torch.tensor(offset, dtype=torch.float32))

    def forward(self, rays: torch.Tensor) -> dict:
        cfg = self.cfg
        if rays.ndim == 4:
            rays = rays[None]
        if rays.ndim != 5 or tuple(rays.shape[1:]) != (cfg.window, cfg.cameras, cfg.joints, RAY_DIM):
            raise InputError(f"expected (B, {cfg.window}, {cfg.cameras}, {cfg.joints}, 7) rays, "
                             f"got {tuple(rays.shape)}")
        B, T, K, Jk, _ = rays.shape
        rays = rays.to(self.token.weight.dtype)
        present = rays[..., 6] > 0
        time = self.time_table.to(rays.dtype)
        x = (self.token(rays) + self.camera_embed[:, None] + self.joint_embed[None]
             + time[:, None, None])
        x = x.reshape(B, T, K * Jk, -1)
        bias = torch.where(present, 0.0, _MASKED).to(rays.dtype).reshape(B, T, K * Jk)
        q = (self.readout + time)[None].expand(B, T, -1)
        for block in self.blocks:
            x, q = block(x, q, bias)
        out = self.head(self.norm_out(q)) + self.out_offset.to(rays.dtype)
        n = NUM_JOINTS * 6
        return {
            "theta": out[..., :n].reshape(B, T, NUM_JOINTS, 6),
            "beta": out[..., n:n + NUM_BETAS],
            "omega": out[..., n + NUM_BETAS:n + NUM_BETAS + 6],
            "tau": TAU_SCALE * out[..., n + NUM_BETAS + 6:],
        }


def _orthonormal6d(r: torch.Tensor) -> np.ndarray:
    R = rot6d_to_matrix_t(r.double())
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1).numpy()


def to_body_states(out: dict, pool_beta: bool = True) -> list:
    """Network output to one local-frame BodyState batch (T frames) per window."""
    states = []
    for b in range(out["tau"].shape[0]):
        beta = out["beta"][b].detach().double().numpy()
        if pool_beta:
            beta = np.broadcast_to(beta.mean(axis=0), beta.shape).copy()
        states.append(BodyState(_orthonormal6d(out["theta"][b].detach()), beta,
                                _orthonormal6d(out["omega"][b].detach()),
                                out["tau"][b].detach().double().numpy()))
    return states


@torch.no_grad()
def predict(net: LampNet, cloud: RayCloud, pool_beta: bool = True) -> BodyState:
    """World-frame per-frame states (length T) for one ray cloud."""
    rays = torch.as_tensor(cloud.rays, dtype=net.token.weight.dtype)
    local = to_body_states(net(rays), pool_beta)[0]
    return transform_states(local, cloud.frame)
