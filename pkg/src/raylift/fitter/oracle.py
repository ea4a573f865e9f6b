"""Closed-form multi-ray triangulation used to check lifting end to end."""
from __future__ import annotations

import numpy as np

from ..geometry import RayCloud, intersect_rays, ray_points


def triangulate_oracle(cloud: RayCloud, min_angle_deg: float = 1.0):
    """World keypoints (T, 17, 3) and a validity mask (T, 17).

    Each keypoint is the least-squares intersection of its confident rays
    across cameras; it is valid only with two rays at least
    ``min_angle_deg`` apart and a non-singular normal matrix.
    """
    rays = np.moveaxis(cloud.rays, 1, 2)                 # (T, J, K, 7)
    pts, ok = intersect_rays(rays[..., :3], ray_points(rays), rays[..., 6] > 0,
                             min_angle_deg)
    world = cloud.frame.apply(pts)
    return np.where(ok[..., None], world, 0.0), ok
