"""The full avatar: splats + skinning + color head, rendered end to end with a backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .appearance import (ColorMLP, color_backward, color_forward, sh_color, sh_color_backward,
                         view_directions, view_directions_backward)
from .camera import Camera
from .deform import DeformContext, deform, deform_backward
from .gauss import PosedGaussians, SpacetimeGaussians
from .render import RenderOutput, Splats2D, project, project_backward, render, render_backward
from .skeleton import Pose, Skeleton, SkinningWeights

COLOR_MODES = ("mlp", "sh")


@dataclass
class AvatarModel:
    gaussians: SpacetimeGaussians
    skin: SkinningWeights
    mlp: ColorMLP
    color_mode: str = "mlp"
    sh_degree: int = 2

    def __post_init__(self):
        if self.color_mode not in COLOR_MODES:
            raise ValueError(f"color_mode must be one of {COLOR_MODES}")
        if len(self.skin) != len(self.gaussians):
            raise ValueError("skinning rows do not match splat count")

    def __len__(self):
        return len(self.gaussians)

    def copy(self) -> "AvatarModel":
        return AvatarModel(self.gaussians.copy(), SkinningWeights(self.skin.indices.copy(), self.skin.weights.copy()),
                           self.mlp.copy(), self.color_mode, self.sh_degree)


@dataclass
class FrameRender:
    ctx: DeformContext
    cam: Camera
    posed: PosedGaussians
    colors: np.ndarray
    view_dirs: np.ndarray
    color_cache: object
    splats: Splats2D
    out: RenderOutput

    @property
    def image(self) -> np.ndarray:
        return self.out.image


def pose_vector(pose: Pose) -> np.ndarray:
    return pose.rotations.reshape(-1)


def render_frame(model: AvatarModel, skeleton: Skeleton, pose: Pose, t: float, cam: Camera,
                 background=(0.0, 0.0, 0.0), early_out: bool = True) -> FrameRender:
    ctx = DeformContext(skeleton, pose, t, model.skin)
    posed = deform(model.gaussians, ctx)
    dirs = view_directions(posed.positions, cam.center)
    if model.color_mode == "sh":
        colors, cache = sh_color(model.gaussians.sh_coeffs, dirs, model.sh_degree)
    else:
        colors, cache = color_forward(model.gaussians, posed.positions, pose_vector(pose), dirs, model.mlp)
    splats = project(posed, cam, colors)
    out = render(splats, cam, background, early_out=early_out)
    return FrameRender(ctx, cam, posed, colors, dirs, cache, splats, out)


def render_frame_backward(model: AvatarModel, fr: FrameRender, d_image: np.ndarray,
                          extra_position_grad: np.ndarray | None = None):
    """Gradients of sum(d_image * image) for splat parameters and MLP weights.

    Returns (splat grads by field name, mlp grads by parameter name).
    """
    g = model.gaussians
    d2 = render_backward(fr.splats, fr.cam, fr.out, d_image)
    posed_grads, d_colors = project_backward(fr.posed, fr.cam, fr.splats, d2)
    mlp_grads = {}
    extra = {}
    if model.color_mode == "sh":
        d_sh, d_view = sh_color_backward(g.sh_coeffs, fr.view_dirs, fr.color_cache, d_colors, model.sh_degree)
        extra["sh_coeffs"] = d_sh
    else:
        mlp_grads, d_pos, d_view, d_motion, d_rot, d_feat = color_backward(fr.color_cache, d_colors, model.mlp, g.n_p)
        posed_grads.positions += d_pos
        extra["motion_coeffs"] = d_motion
        extra["rot_coeffs"] = d_rot
        extra["appearance_feat"] = d_feat
    posed_grads.positions += view_directions_backward(fr.posed.positions, fr.cam.center, d_view)
    if extra_position_grad is not None:
        posed_grads.positions += extra_position_grad
    grads = deform_backward(g, fr.ctx, posed_grads)
    for k, v in extra.items():
        grads[k] = grads[k] + v
    return grads, mlp_grads
