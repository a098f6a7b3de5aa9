"""Tile-based differentiable splatting rasterizer and its brute-force oracle.

Pixel centers sit on integer coordinates. A splat contributes to a pixel only
inside its 3-sigma ellipse (Mahalanobis distance squared <= 9); the same test
is applied by the tiled path and the oracle so both compute identical sums.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import NEAR, Camera
from .gauss import PosedGaussians, PosedGrads

TILE = 16
COV2D_REG = 0.3
ALPHA_MAX = 0.999
T_EARLY_OUT = 1e-4
CUTOFF_M2 = 9.0


@dataclass
class Splats2D:
    means: np.ndarray      # (M, 2) pixels
    cov2d: np.ndarray      # (M, 2, 2), regularized
    depths: np.ndarray     # (M,)
    opacities: np.ndarray  # (M,)
    colors: np.ndarray     # (M, 3)
    source: np.ndarray     # (M,) index into the posed set

    def __len__(self):
        return len(self.means)

    @property
    def conics(self) -> np.ndarray:
        a, b, c = self.cov2d[:, 0, 0], self.cov2d[:, 0, 1], self.cov2d[:, 1, 1]
        det = a * c - b * b
        return np.stack([c / det, -b / det, a / det], axis=1)

    @property
    def extents(self) -> np.ndarray:
        """Half-widths of the axis-aligned box around the 3-sigma ellipse."""
        diag = np.stack([self.cov2d[:, 0, 0], self.cov2d[:, 1, 1]], axis=1)
        return 3.0 * np.sqrt(diag) * (1.0 + 1e-9) + 1e-9

    def depth_order(self) -> np.ndarray:
        return np.lexsort((self.source, self.depths))

    @classmethod
    def empty(cls) -> "Splats2D":
        return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


@dataclass
class Splat2DGrads:
    means: np.ndarray
    cov2d: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray         # (H, W, 3)
    alpha: np.ndarray         # (H, W)
    n_contrib: np.ndarray     # (H, W) splats with nonzero weight
    splat_weights: np.ndarray  # (M,) total compositing weight of each splat
    # saved forward state
    offsets: np.ndarray
    entries: np.ndarray
    n_last: np.ndarray
    background: np.ndarray
    tile: int


def project(posed: PosedGaussians, cam: Camera, colors=None) -> Splats2D:
    """EWA projection; splats behind the near plane or fully off-image are culled."""
    n = len(posed)
    colors = np.zeros((n, 3)) if colors is None else np.asarray(colors, dtype=np.float64)
    p = cam.to_camera(posed.positions)
    z = p[:, 2]
    keep = z > NEAR
    zs = np.where(keep, z, 1.0)
    x, y = p[:, 0], p[:, 1]
    means = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / (zs * zs)
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / (zs * zs)
    M = J @ cam.R
    cov = np.einsum("nij,njk,nlk->nil", M, posed.covariances, M)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    cov[:, 0, 0] += COV2D_REG
    cov[:, 1, 1] += COV2D_REG
    ext = 3.0 * np.sqrt(np.maximum(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=1), 0.0))
    keep &= (means[:, 0] + ext[:, 0] >= 0) & (means[:, 0] - ext[:, 0] <= cam.width - 1)
    keep &= (means[:, 1] + ext[:, 1] >= 0) & (means[:, 1] - ext[:, 1] <= cam.height - 1)
    idx = np.nonzero(keep)[0]
    return Splats2D(means[idx], cov[idx], z[idx], np.asarray(posed.opacities)[idx], colors[idx], idx)


def project_backward(posed: PosedGaussians, cam: Camera, splats: Splats2D,
                     grads: Splat2DGrads) -> tuple[PosedGrads, np.ndarray]:
    """Map 2D splat gradients back to posed-splat gradients and per-splat color gradients."""
    n = len(posed)
    out = PosedGrads.zeros(n)
    d_colors = np.zeros((n, 3))
    idx = splats.source
    if len(idx) == 0:
        return out, d_colors
    R = cam.R
    p = cam.to_camera(posed.positions[idx])
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = cam.fx, cam.fy
    m = len(idx)
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    M = J @ R
    S3 = posed.covariances[idx]
    G = 0.5 * (grads.cov2d + np.swapaxes(grads.cov2d, 1, 2))
    out.covariances[idx] = np.einsum("nji,njk,nkl->nil", M, G, M)
    dM = 2.0 * np.einsum("nij,njk,nkl->nil", G, M, S3)
    dJ = dM @ R.T
    dmean = grads.means
    dx = dmean[:, 0] * fx / z - dJ[:, 0, 2] * fx / (z * z)
    dy = dmean[:, 1] * fy / z - dJ[:, 1, 2] * fy / (z * z)
    dz = (-dmean[:, 0] * fx * x / (z * z) - dmean[:, 1] * fy * y / (z * z)
          - dJ[:, 0, 0] * fx / (z * z) - dJ[:, 1, 1] * fy / (z * z)
          + dJ[:, 0, 2] * 2.0 * fx * x / z ** 3 + dJ[:, 1, 2] * 2.0 * fy * y / z ** 3)
    dp = np.stack([dx, dy, dz], axis=1)
    out.positions[idx] = dp @ R
    out.opacities[idx] = grads.opacities
    d_colors[idx] = grads.colors
    return out, d_colors


# ---------------------------------------------------------------- kernels

@numba.njit(cache=True)
def _bin_splats(means, ext, order, width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    m = order.shape[0]
    ranges = np.empty((m, 4), dtype=np.int64)
    for k in range(m):
        s = order[k]
        x0 = max(0, int(np.ceil(means[s, 0] - ext[s, 0])))
        x1 = min(width - 1, int(np.floor(means[s, 0] + ext[s, 0])))
        y0 = max(0, int(np.ceil(means[s, 1] - ext[s, 1])))
        y1 = min(height - 1, int(np.floor(means[s, 1] + ext[s, 1])))
        if x0 > x1 or y0 > y1:
            ranges[k, 0] = 1
            ranges[k, 1] = 0
            ranges[k, 2] = 1
            ranges[k, 3] = 0
            continue
        ranges[k, 0] = x0 // tile
        ranges[k, 1] = x1 // tile
        ranges[k, 2] = y0 // tile
        ranges[k, 3] = y1 // tile
        for ty in range(ranges[k, 2], ranges[k, 3] + 1):
            for tx in range(ranges[k, 0], ranges[k, 1] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for k in range(m):
        for ty in range(ranges[k, 2], ranges[k, 3] + 1):
            for tx in range(ranges[k, 0], ranges[k, 1] + 1):
                t = ty * ntx + tx
                entries[fill[t]] = order[k]
                fill[t] += 1
    return offsets, entries


@numba.njit(parallel=True, cache=True)
def _forward_tiled(means, conics, opac, colors, offsets, entries, width, height, tile,
                   bg, early_out, image, alpha, n_contrib, n_last, entry_w):
    ntx = (width + tile - 1) // tile
    nt = offsets.shape[0] - 1
    for ti in numba.prange(nt):
        tx = ti % ntx
        ty = ti // ntx
        start = offsets[ti]
        end = offsets[ti + 1]
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                cnt = 0
                last = end
                for e in range(start, end):
                    s = entries[e]
                    dx = px - means[s, 0]
                    dy = py - means[s, 1]
                    m2 = conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy + conics[s, 2] * dy * dy
                    if m2 > CUTOFF_M2:
                        continue
                    al = opac[s] * np.exp(-0.5 * m2)
                    if al > ALPHA_MAX:
                        al = ALPHA_MAX
                    w = al * T
                    r += w * colors[s, 0]
                    g += w * colors[s, 1]
                    b += w * colors[s, 2]
                    entry_w[e] += w
                    if w > 0.0:
                        cnt += 1
                    T = T * (1.0 - al)
                    if early_out and T < T_EARLY_OUT:
                        last = e + 1
                        break
                image[py, px, 0] = r + T * bg[0]
                image[py, px, 1] = g + T * bg[1]
                image[py, px, 2] = b + T * bg[2]
                alpha[py, px] = 1.0 - T
                n_contrib[py, px] = cnt
                n_last[py, px] = last


@numba.njit(cache=True)
def _forward_oracle(means, conics, opac, colors, order, width, height, bg, early_out,
                    image, alpha, n_contrib, splat_w):
    for py in range(height):
        for px in range(width):
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            cnt = 0
            for k in range(order.shape[0]):
                s = order[k]
                dx = px - means[s, 0]
                dy = py - means[s, 1]
                m2 = conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy + conics[s, 2] * dy * dy
                if m2 > CUTOFF_M2:
                    continue
                al = opac[s] * np.exp(-0.5 * m2)
                if al > ALPHA_MAX:
                    al = ALPHA_MAX
                w = al * T
                r += w * colors[s, 0]
                g += w * colors[s, 1]
                b += w * colors[s, 2]
                splat_w[s] += w
                if w > 0.0:
                    cnt += 1
                T = T * (1.0 - al)
                if early_out and T < T_EARLY_OUT:
                    break
            image[py, px, 0] = r + T * bg[0]
            image[py, px, 1] = g + T * bg[1]
            image[py, px, 2] = b + T * bg[2]
            alpha[py, px] = 1.0 - T
            n_contrib[py, px] = cnt


@numba.njit(parallel=True, cache=True)
def _backward_tiled(means, conics, opac, colors, offsets, entries, width, height, tile,
                    image, n_last, up, g_mean, g_conic, g_opac, g_color):
    ntx = (width + tile - 1) // tile
    nt = offsets.shape[0] - 1
    for ti in numba.prange(nt):
        tx = ti % ntx
        ty = ti // ntx
        start = offsets[ti]
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                u0 = up[py, px, 0]
                u1 = up[py, px, 1]
                u2 = up[py, px, 2]
                if u0 == 0.0 and u1 == 0.0 and u2 == 0.0:
                    continue
                c0 = image[py, px, 0]
                c1 = image[py, px, 1]
                c2 = image[py, px, 2]
                T = 1.0
                p0 = 0.0
                p1 = 0.0
                p2 = 0.0
                for e in range(start, n_last[py, px]):
                    s = entries[e]
                    dx = px - means[s, 0]
                    dy = py - means[s, 1]
                    a = conics[s, 0]
                    bb = conics[s, 1]
                    c = conics[s, 2]
                    m2 = a * dx * dx + 2.0 * bb * dx * dy + c * dy * dy
                    if m2 > CUTOFF_M2:
                        continue
                    gk = np.exp(-0.5 * m2)
                    raw = opac[s] * gk
                    al = raw if raw < ALPHA_MAX else ALPHA_MAX
                    w = al * T
                    p0 += w * colors[s, 0]
                    p1 += w * colors[s, 1]
                    p2 += w * colors[s, 2]
                    g_color[e, 0] += w * u0
                    g_color[e, 1] += w * u1
                    g_color[e, 2] += w * u2
                    inv = 1.0 / (1.0 - al)
                    dal = (u0 * (T * colors[s, 0] - (c0 - p0) * inv)
                           + u1 * (T * colors[s, 1] - (c1 - p1) * inv)
                           + u2 * (T * colors[s, 2] - (c2 - p2) * inv))
                    T = T * (1.0 - al)
                    if raw < ALPHA_MAX:
                        g_opac[e] += dal * gk
                        dm = -0.5 * raw * dal
                        g_conic[e, 0] += dm * dx * dx
                        g_conic[e, 1] += dm * 2.0 * dx * dy
                        g_conic[e, 2] += dm * dy * dy
                        g_mean[e, 0] += dm * -(2.0 * a * dx + 2.0 * bb * dy)
                        g_mean[e, 1] += dm * -(2.0 * bb * dx + 2.0 * c * dy)


@numba.njit(cache=True)
def _reduce_entries(entries, vals, m):
    out = np.zeros((m, vals.shape[1]))
    for e in range(entries.shape[0]):
        s = entries[e]
        for j in range(vals.shape[1]):
            out[s, j] += vals[e, j]
    return out


# ---------------------------------------------------------------- API

def _bg(background) -> np.ndarray:
    return np.asarray(background, dtype=np.float64).reshape(3)


def render(splats: Splats2D, cam: Camera, background=(0.0, 0.0, 0.0), *,
           early_out: bool = True, tile: int = TILE) -> RenderOutput:
    H, W = cam.height, cam.width
    bg = _bg(background)
    m = len(splats)
    order = splats.depth_order().astype(np.int64)
    means = np.ascontiguousarray(splats.means, dtype=np.float64)
    offsets, entries = _bin_splats(means, np.ascontiguousarray(splats.extents), order, W, H, tile)
    image = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int64)
    n_last = np.zeros((H, W), dtype=np.int64)
    entry_w = np.zeros(len(entries))
    _forward_tiled(means, np.ascontiguousarray(splats.conics), np.ascontiguousarray(splats.opacities, dtype=np.float64),
                   np.ascontiguousarray(splats.colors, dtype=np.float64), offsets, entries, W, H, tile,
                   bg, early_out, image, alpha, n_contrib, n_last, entry_w)
    weights = _reduce_entries(entries, entry_w[:, None], m)[:, 0]
    return RenderOutput(image, alpha, n_contrib, weights, offsets, entries, n_last, bg, tile)


def render_backward(splats: Splats2D, cam: Camera, out: RenderOutput, upstream: np.ndarray) -> Splat2DGrads:
    """Gradients of sum(upstream * image) with respect to every 2D splat field."""
    m = len(splats)
    E = len(out.entries)
    g_mean = np.zeros((E, 2))
    g_conic = np.zeros((E, 3))
    g_opac = np.zeros((E, 1))
    g_color = np.zeros((E, 3))
    conics = np.ascontiguousarray(splats.conics)
    _backward_tiled(np.ascontiguousarray(splats.means), conics,
                    np.ascontiguousarray(splats.opacities, dtype=np.float64),
                    np.ascontiguousarray(splats.colors, dtype=np.float64), out.offsets, out.entries,
                    cam.width, cam.height, out.tile, out.image, out.n_last,
                    np.ascontiguousarray(upstream, dtype=np.float64), g_mean, g_conic, g_opac[:, 0], g_color)
    packed = _reduce_entries(out.entries, np.concatenate([g_mean, g_conic, g_opac, g_color], axis=1), m)
    d_mean, d_conic, d_opac, d_color = packed[:, :2], packed[:, 2:5], packed[:, 5], packed[:, 5 + 1:]
    # conic = inverse(cov2d); the off-diagonal conic scalar appears twice in the quadratic form
    GQ = np.empty((m, 2, 2))
    GQ[:, 0, 0] = d_conic[:, 0]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * d_conic[:, 1]
    GQ[:, 1, 1] = d_conic[:, 2]
    Q = np.empty((m, 2, 2))
    Q[:, 0, 0] = conics[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = conics[:, 1]
    Q[:, 1, 1] = conics[:, 2]
    d_cov = -Q @ GQ @ Q
    return Splat2DGrads(d_mean, d_cov, d_opac, d_color)


def render_oracle(splats: Splats2D, cam: Camera, background=(0.0, 0.0, 0.0), *,
                  early_out: bool = False) -> RenderOutput:
    """Per-pixel loop over every splat; no tiling, no footprint culling."""
    H, W = cam.height, cam.width
    bg = _bg(background)
    order = splats.depth_order().astype(np.int64)
    image = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    n_contrib = np.zeros((H, W), dtype=np.int64)
    weights = np.zeros(len(splats))
    _forward_oracle(np.ascontiguousarray(splats.means, dtype=np.float64), np.ascontiguousarray(splats.conics),
                    np.ascontiguousarray(splats.opacities, dtype=np.float64),
                    np.ascontiguousarray(splats.colors, dtype=np.float64), order, W, H, bg, early_out,
                    image, alpha, n_contrib, weights)
    empty = np.zeros(0, dtype=np.int64)
    return RenderOutput(image, alpha, n_contrib, weights, empty, empty, np.zeros((H, W), dtype=np.int64), bg, 0)
