"""Optical-flow-guided density control: where to add splats, which to keep."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from .camera import NEAR, Camera
from .gauss import SpacetimeGaussians, sigmoid

FLO_TAG = 202021.25
W_PROTECT = 0.8
MAX_STRIKES = 2


@dataclass
class DensifyConfig:
    tau: float = 0.05              # dynamic-error threshold, mean abs channel error
    step: float = 0.01             # sampling step length, world units
    spread: float = 0.0025         # lateral noise std, world units
    gamma_flow: float = 0.5        # pruning protection coefficient
    window: int = 5                # flow integration window, frames
    delta: float = 2.0             # accumulated-motion threshold, px
    eps_consistency: float = 2.0   # px
    kappa: float = 1.0             # target density boost in moving cells
    cell: int = 16                 # density grid cell, px
    refine_blend: float = 0.3
    opacity_floor: float = 0.005
    budget_factor: float = 2.0     # splat budget relative to the initial count

    def __post_init__(self):
        for name in ("tau", "step", "spread", "gamma_flow", "window", "delta", "eps_consistency",
                     "kappa", "cell", "opacity_floor", "budget_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.spread > self.step:
            raise ValueError("spread must not exceed step")
        if not 0.0 <= self.refine_blend <= 1.0:
            raise ValueError("refine_blend must lie in [0, 1]")


# ---------------------------------------------------------------- .flo files

def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    h, w, c = flow.shape
    if c != 2:
        raise ValueError("flow must be (H, W, 2)")
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_TAG, w, h))
        f.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tag, w, h = struct.unpack("<fii", data[:12])
    if tag != np.float32(FLO_TAG):
        raise ValueError(f"{path}: bad .flo magic {tag}")
    n = 2 * w * h
    if len(data) != 12 + 4 * n:
        raise ValueError(f"{path}: expected {n} floats for {w}x{h}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).copy()


def sample_flow(flow: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear flow lookup at pixel positions; second value flags in-image samples."""
    h, w = flow.shape[:2]
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    x = np.clip(uv[:, 0], 0, w - 1)
    y = np.clip(uv[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    f = flow.astype(np.float64)
    v = ((1 - fx) * (1 - fy) * f[y0, x0] + fx * (1 - fy) * f[y0, x1]
         + (1 - fx) * fy * f[y1, x0] + fx * fy * f[y1, x1])
    v[~inside] = 0.0
    return v, inside


# ---------------------------------------------------------------- masks

def detect_dynamic(rendered: np.ndarray, ground_truth: np.ndarray, tau: float) -> np.ndarray:
    if rendered.shape != ground_truth.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {ground_truth.shape}")
    err = np.abs(np.asarray(rendered, dtype=np.float64) - ground_truth)
    return err.mean(axis=-1) > tau


def accumulated_flow(flow_history, window: int) -> np.ndarray:
    """Sum of flow magnitudes over the last min(window + 1, available) frames."""
    hist = np.asarray(flow_history, dtype=np.float64)
    if hist.ndim == 3:
        hist = hist[None]
    if len(hist) == 0:
        raise ValueError("need at least one frame of flow history")
    recent = hist[-(window + 1):]
    return np.linalg.norm(recent, axis=-1).sum(axis=0)


def valid_region(flow_history, window: int, delta: float) -> np.ndarray:
    return accumulated_flow(flow_history, window) > delta


def motion_strength(flow_history, window: int, delta: float) -> np.ndarray:
    return np.clip(accumulated_flow(flow_history, window) / (2.0 * delta), 0.0, 1.0)


# ---------------------------------------------------------------- sampling

def flow_offsets(dirs_world: np.ndarray, step: float, spread: float, rng: np.random.Generator) -> np.ndarray:
    """step * dir + N(0, spread^2) per row."""
    dirs_world = np.asarray(dirs_world, dtype=np.float64).reshape(-1, 3)
    noise = rng.normal(0.0, 1.0, size=dirs_world.shape) * spread if spread > 0 else 0.0
    return step * dirs_world + noise


def recenter_polynomial(coeffs: np.ndarray, shift: np.ndarray, first_order: int) -> np.ndarray:
    """Re-expand sum_k a_k (t - c)^k around c + shift.

    ``coeffs`` is (N, K, D) holding orders first_order..first_order+K-1. The
    result has orders 0..first_order+K-1; entry j is sum_{k>=j} a_k C(k, j) shift^(k-j).
    """
    n, K, D = coeffs.shape
    top = first_order + K - 1
    out = np.zeros((n, top + 1, D))
    for j in range(top + 1):
        for k in range(max(j, first_order), top + 1):
            out[:, j] += comb(k, j) * (shift ** (k - j))[:, None] * coeffs[:, k - first_order]
    return out


def sample_along_flow(g: SpacetimeGaussians, seeds: np.ndarray, seed_positions: np.ndarray,
                      flow_px: np.ndarray, cam: Camera, lbs_jac: np.ndarray, t: float,
                      step: float, spread: float, rng: np.random.Generator):
    """Spawn one splat per seed, offset along the seed's lifted flow direction.

    Returns (new splats, world offsets, accepted-seed mask). Seeds with
    vanishing flow are rejected. The clone keeps the seed's trajectory shape,
    re-centered at ``t``, and sits at seed position + offset at time ``t``.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    flow_px = np.asarray(flow_px, dtype=np.float64).reshape(-1, 2)
    norm = np.linalg.norm(flow_px, axis=1)
    ok = norm > 1e-6
    seeds, flow_px, norm = seeds[ok], flow_px[ok], norm[ok]
    pos = np.asarray(seed_positions, dtype=np.float64).reshape(-1, 3)[ok]
    depth = cam.to_camera(pos)[:, 2]
    dirs = cam.pixel_direction_to_world(flow_px / norm[:, None], depth)
    offsets = flow_offsets(dirs, step, spread, rng)
    new = g.subset(seeds)
    shift = t - new.temporal_center_pos
    motion = recenter_polynomial(new.motion_coeffs, shift, 1)
    const = motion[:, 0]
    new.motion_coeffs = motion[:, 1:]
    new.rot_coeffs = recenter_polynomial(new.rot_coeffs, t - new.temporal_center_rot, 0)
    new.temporal_center_pos[:] = t
    new.temporal_center_rot[:] = t
    A = lbs_jac[seeds]
    rhs = (const + offsets)[..., None]
    try:
        delta_c = np.linalg.solve(A, rhs)[..., 0]
    except np.linalg.LinAlgError:
        delta_c = np.einsum("nij,nj->ni", np.linalg.pinv(A), rhs[..., 0])
    new.canonical_pos = new.canonical_pos + delta_c
    return new, offsets, ok


# ---------------------------------------------------------------- validation

def check_consistency(pos_prev: np.ndarray, pos_k: np.ndarray, flow_prev: np.ndarray,
                      cam_prev: Camera, cam_k: Camera, eps: float):
    """Accept mask and pixel residuals of the one-step flow prediction."""
    uv_p, z_p = cam_prev.project(pos_prev)
    uv_k, z_k = cam_k.project(pos_k)
    v, inside = sample_flow(flow_prev, uv_p)
    resid = np.linalg.norm(uv_k - (uv_p + v), axis=1)
    ok = (z_p > NEAR) & (z_k > NEAR) & inside
    resid = np.where(ok, resid, np.inf)
    return resid <= eps, resid


def update_strikes(strikes: np.ndarray, accept: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Consecutive-failure counters; second value marks splats to delete."""
    strikes = np.where(accept, 0, strikes + 1)
    return strikes, strikes >= MAX_STRIKES


# ---------------------------------------------------------------- pruning

def flow_weighted_contribution(C, W, gamma_flow):
    return np.asarray(C, dtype=np.float64) * (1.0 + gamma_flow * np.asarray(W, dtype=np.float64))


def max_temporal_opacity(g: SpacetimeGaussians) -> np.ndarray:
    t_star = np.clip(g.temporal_center_pos, 0.0, 1.0)
    dt = t_star - g.temporal_center_pos
    return sigmoid(g.opacity_logit) * np.exp(-g.temporal_sharpness * dt * dt)


def prune(opacity_max, contributions, W, accepted, *, floor: float, gamma_flow: float,
          budget: int | None) -> np.ndarray:
    """Keep mask after opacity-floor and budgeted, flow-protected removal."""
    opacity_max = np.asarray(opacity_max, dtype=np.float64)
    keep = opacity_max >= floor
    if budget is None or keep.sum() <= budget:
        return keep
    cflow = flow_weighted_contribution(contributions, W, gamma_flow)
    protected = np.asarray(accepted, dtype=bool) & (np.asarray(W) > W_PROTECT)
    candidates = np.nonzero(keep & ~protected)[0]
    order = candidates[np.lexsort((candidates, cflow[candidates]))]
    excess = int(keep.sum()) - budget
    keep[order[:excess]] = False
    return keep


# ---------------------------------------------------------------- density

@dataclass
class DensityReport:
    current: np.ndarray       # (ny, nx) splats per cell
    target: np.ndarray        # (ny, nx)
    dynamic: np.ndarray       # (H, W) bool
    valid: np.ndarray         # (H, W) bool, the valid region
    cell_valid: np.ndarray    # (ny, nx) bool, cell touches the valid region
    cell_strength: np.ndarray  # (ny, nx) mean motion strength over valid pixels
    cell: int


def cell_counts(uv: np.ndarray, width: int, height: int, cell: int) -> np.ndarray:
    nx = (width + cell - 1) // cell
    ny = (height + cell - 1) // cell
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    px = np.rint(uv).astype(np.int64)
    inside = (px[:, 0] >= 0) & (px[:, 0] < width) & (px[:, 1] >= 0) & (px[:, 1] < height)
    cx, cy = px[inside, 0] // cell, px[inside, 1] // cell
    counts = np.zeros((ny, nx))
    np.add.at(counts, (cy, cx), 1.0)
    return counts


def _cell_reduce(mask_or_map: np.ndarray, cell: int, op) -> np.ndarray:
    h, w = mask_or_map.shape
    ny, nx = (h + cell - 1) // cell, (w + cell - 1) // cell
    out = np.zeros((ny, nx))
    for j in range(ny):
        for i in range(nx):
            out[j, i] = op(mask_or_map[j * cell:(j + 1) * cell, i * cell:(i + 1) * cell])
    return out


def density_report(uv: np.ndarray, dynamic: np.ndarray, valid: np.ndarray, strength: np.ndarray,
                   cell: int, kappa: float) -> DensityReport:
    h, w = valid.shape
    current = cell_counts(uv, w, h, cell)
    nonempty = current[current > 0]
    base = float(np.median(nonempty)) if len(nonempty) else 0.0
    cell_valid = _cell_reduce(valid, cell, np.any).astype(bool)
    wsum = _cell_reduce(np.where(valid, strength, 0.0), cell, np.sum)
    vcount = _cell_reduce(valid.astype(float), cell, np.sum)
    cell_strength = np.where(vcount > 0, wsum / np.maximum(vcount, 1), 0.0)
    target = base * (1.0 + kappa * cell_strength)
    return DensityReport(current, target, dynamic, valid, cell_valid, cell_strength, cell)


def density_trigger(report: DensityReport) -> list[tuple[int, int]]:
    hit = report.cell_valid & (report.current < report.target)
    return [(int(j), int(i)) for j, i in zip(*np.nonzero(hit))]


def moving_static_density_ratio(report: DensityReport) -> float:
    """Mean splats per moving cell over mean splats per occupied static cell."""
    moving = report.cell_valid
    static = ~report.cell_valid & (report.current > 0)
    if not moving.any() or not static.any():
        return float("nan")
    return float(report.current[moving].mean() / report.current[static].mean())


def refine_flow(v_est: np.ndarray, v_traj: np.ndarray, beta: float) -> np.ndarray:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return (1.0 - beta) * np.asarray(v_est, dtype=np.float64) + beta * np.asarray(v_traj, dtype=np.float64)
