"""Training objective terms, each returning its value and gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gauss import SpacetimeGaussians, sigmoid
from .metrics import ssim

EMA_FLOOR = 1e-8
LAMBDA_MIN = 1e-4
LAMBDA_MAX = 10.0


@dataclass
class LossBreakdown:
    rgb: float
    flow: float
    temp: float
    reg: float
    lambdas: tuple[float, float, float]

    @property
    def total(self) -> float:
        l1, l2, l3 = self.lambdas
        return self.rgb + l1 * self.flow + l2 * self.temp + l3 * self.reg


def loss_rgb(render: np.ndarray, gt: np.ndarray, lambda_ssim: float = 0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM), and its gradient wrt ``render``."""
    if render.shape != gt.shape:
        raise ValueError(f"shape mismatch {render.shape} vs {gt.shape}")
    diff = render - gt
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    val = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, ds = ssim(render, gt, with_grad=True)
        val += lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * ds
    return val, grad


def loss_flow(v_traj: np.ndarray, v_flow: np.ndarray, weights: np.ndarray):
    """Weighted mean L1 mismatch between splat screen motion and observed flow."""
    weights = np.asarray(weights, dtype=np.float64)
    wsum = weights.sum()
    if wsum <= 0:
        return 0.0, np.zeros_like(v_traj, dtype=np.float64)
    diff = np.asarray(v_traj, dtype=np.float64) - v_flow
    val = float(np.sum(weights * np.abs(diff).sum(axis=1)) / wsum)
    return val, weights[:, None] * np.sign(diff) / wsum


def loss_temp(render_t: np.ndarray, render_prev: np.ndarray, static_mask: np.ndarray):
    """Mean L1 change between consecutive renders over static pixels."""
    static_mask = np.asarray(static_mask, dtype=bool)
    count = static_mask.sum() * render_t.shape[-1]
    if count == 0:
        return 0.0, np.zeros_like(render_t)
    diff = (render_t - render_prev) * static_mask[..., None]
    return float(np.abs(diff).sum() / count), np.sign(diff) / count


def loss_reg(g: SpacetimeGaussians):
    """Opacity sparsity plus order-weighted motion smoothness; returns (value, grads)."""
    n = len(g)
    grads = {}
    if n == 0:
        return 0.0, grads
    op = sigmoid(g.opacity_logit)
    kp = np.arange(1, g.n_p + 1, dtype=np.float64) ** 2
    kq = np.arange(0, g.n_q + 1, dtype=np.float64) ** 2
    motion = np.einsum("k,nkd,nkd->", kp, g.motion_coeffs, g.motion_coeffs)
    rot = np.einsum("k,nkd,nkd->", kq, g.rot_coeffs, g.rot_coeffs)
    val = float(op.mean() + (motion + rot) / n)
    grads["opacity_logit"] = op * (1.0 - op) / n
    grads["motion_coeffs"] = 2.0 * kp[None, :, None] * g.motion_coeffs / n
    grads["rot_coeffs"] = 2.0 * kq[None, :, None] * g.rot_coeffs / n
    return val, grads


def adaptive_weights(ema_rgb: float, ema_aux, ratios) -> tuple[float, float, float]:
    """lambda_i = r_i * ema(rgb) / ema(L_i), clamped."""
    ema_aux = np.maximum(np.asarray(ema_aux, dtype=np.float64), EMA_FLOOR)
    lam = np.asarray(ratios, dtype=np.float64) * max(ema_rgb, EMA_FLOOR) / ema_aux
    lam = np.clip(lam, LAMBDA_MIN, LAMBDA_MAX)
    return tuple(float(v) for v in lam)
