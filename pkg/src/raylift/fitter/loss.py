"""Training objective: parameter, joint, surface and velocity terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..body_model import DEFAULT_SKELETON, NUM_JOINTS, BodyState, Skeleton
from ..config import LossWeights
from .net import InputError, rot6d_to_matrix_t

COMPONENTS = ("smpl", "joints3d", "vertices", "velocity")


def forward_kinematics_t(skel: Skeleton, theta, beta, omega, tau):
    """Torch twin of :func:`raylift.body_model.forward_kinematics`."""
    dtype = tau.dtype
    local = rot6d_to_matrix_t(theta)
    root = rot6d_to_matrix_t(omega)
    basis = torch.as_tensor(skel.shape_basis, dtype=dtype)
    scales = 1.0 + beta @ basis
    offsets = torch.as_tensor(skel.rest_offsets, dtype=dtype)
    surf = torch.as_tensor(skel.surface_offsets, dtype=dtype)
    G = [root @ local[..., 0, :, :]]
    P = [tau]
    S = []
    for j in range(1, NUM_JOINTS):
        p = int(skel.parents[j])
        s = scales[..., j - 1, None]
        Gp = G[p]
        P.append(P[p] + (Gp @ offsets[j]) * s)
        S.append(P[p][..., None, :] + (surf[j - 1] @ Gp.transpose(-1, -2)) * s[..., None])
        G.append(Gp @ local[..., j, :, :])
    joints = torch.stack(P, dim=-2)
    surface = torch.cat(S, dim=-2)
    return joints, surface


def _param_vector(theta, beta, omega, tau):
    lead = tau.shape[:-1]
    return torch.cat([theta.reshape(lead + (-1,)), beta, omega, tau], dim=-1)


@dataclass
class LossResult:
    total: torch.Tensor
    parts: dict          # name -> unweighted scalar tensor

    def as_floats(self) -> dict:
        out = {"total": float(self.total.detach())}
        out.update({k: float(v.detach()) for k, v in self.parts.items()})
        return out


def as_tensors(states: BodyState, dtype=torch.float32) -> dict:
    return {k: torch.as_tensor(np.asarray(getattr(states, k)), dtype=dtype)
            for k in ("theta", "beta", "omega", "tau")}


def motion_loss(pred: dict, gt: dict, weights: LossWeights = LossWeights(),
                skel: Skeleton = DEFAULT_SKELETON) -> LossResult:
    """Weighted sum of the four terms on (..., T, ...) tensors.

    Parameter term: squared deviation of the flattened parameter vector,
    summed per frame and averaged over frames. Joint and surface terms:
    squared point distance averaged over points and frames. Velocity term:
    squared difference of per-frame joint displacements over T - 1 steps.
    """
    if pred["tau"].shape != gt["tau"].shape:
        raise InputError(f"length mismatch: {tuple(pred['tau'].shape)} vs {tuple(gt['tau'].shape)}")
    if pred["tau"].shape[-2] < 2:
        raise InputError("need at least two frames")
    smpl = ((_param_vector(**pred) - _param_vector(**gt)) ** 2).sum(-1).mean()
    pj, pv = forward_kinematics_t(skel, **pred)
    gj, gv = forward_kinematics_t(skel, **gt)
    joints3d = ((pj - gj) ** 2).sum(-1).mean()
    vertices = ((pv - gv) ** 2).sum(-1).mean()
    dp = pj[..., 1:, :, :] - pj[..., :-1, :, :]
    dg = gj[..., 1:, :, :] - gj[..., :-1, :, :]
    velocity = ((dp - dg) ** 2).sum(-1).mean()
    parts = {"smpl": smpl, "joints3d": joints3d, "vertices": vertices, "velocity": velocity}
    total = sum(getattr(weights, name) * parts[name] for name in COMPONENTS)
    return LossResult(total, parts)


def loss(pred: BodyState, gt: BodyState, skel: Skeleton = DEFAULT_SKELETON,
         weights: LossWeights = LossWeights()) -> tuple:
    """NumPy convenience wrapper returning ``(total, components)`` as floats."""
    res = motion_loss(as_tensors(pred, torch.float64), as_tensors(gt, torch.float64),
                      weights, skel)
    parts = res.as_floats()
    return parts.pop("total"), parts
