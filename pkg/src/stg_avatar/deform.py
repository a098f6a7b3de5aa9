"""Rigid skinning followed by the per-splat spacetime polynomial refinement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import NEAR, Camera
from .gauss import (PosedGaussians, PosedGrads, SpacetimeGaussians, eval_motion_offset,
                    grad_gaussian_params, pose_gaussians)
from .skeleton import Pose, Skeleton, SkinningWeights, forward_kinematics, lbs_jacobian, lbs_transform

NOVEL_POSE_TIME = 0.5


@dataclass
class DeformContext:
    skeleton: Skeleton
    pose: Pose
    t: float
    weights: SkinningWeights
    transforms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t={self.t} outside [0, 1]")
        self.transforms = forward_kinematics(self.skeleton, self.pose)

    def bone_rotations(self) -> np.ndarray:
        """Rotation block of each splat's dominant bone, (N, 3, 3)."""
        return self.transforms[self.weights.dominant(), :3, :3]


def frame_time(k: int, n_frames: int) -> float:
    return k / (n_frames - 1) if n_frames > 1 else 0.0


def deform(g: SpacetimeGaussians, ctx: DeformContext) -> PosedGaussians:
    if len(ctx.weights) != len(g):
        raise ValueError(f"{len(ctx.weights)} skinning rows for {len(g)} splats")
    x_l = lbs_transform(g.canonical_pos, ctx.weights, ctx.transforms)
    posed, _ = pose_gaussians(g, ctx.t, x_l, ctx.bone_rotations())
    return posed


def deform_batch(g: SpacetimeGaussians, ctx: DeformContext) -> PosedGaussians:
    """Vectorized ``deform`` over the whole set; row order is preserved."""
    return deform(g, ctx)


def deform_backward(g: SpacetimeGaussians, ctx: DeformContext, upstream: PosedGrads) -> dict[str, np.ndarray]:
    return grad_gaussian_params(g, ctx.t, upstream, base_rotations=ctx.bone_rotations(),
                                position_jacobian=lbs_jacobian(ctx.weights, ctx.transforms))


def posed_positions(g: SpacetimeGaussians, ctx: DeformContext) -> np.ndarray:
    return lbs_transform(g.canonical_pos, ctx.weights, ctx.transforms) + eval_motion_offset(g, ctx.t)


def screen_velocity(g: SpacetimeGaussians, ctx_k: DeformContext, ctx_prev: DeformContext,
                    cam: Camera, cam_prev: Camera | None = None):
    """Pixel displacement from ``ctx_prev`` to ``ctx_k`` and a validity mask.

    Splats behind the near plane at either frame are flagged invalid.
    """
    cam_prev = cam if cam_prev is None else cam_prev
    uv_k, z_k = cam.project(posed_positions(g, ctx_k))
    uv_p, z_p = cam_prev.project(posed_positions(g, ctx_prev))
    valid = (z_k > NEAR) & (z_p > NEAR)
    vel = uv_k - uv_p
    vel[~valid] = 0.0
    return vel, valid
