"""Per-splat color: frequency encodings feeding a small MLP, plus an SH fallback."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gauss import SpacetimeGaussians, sigmoid

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


@dataclass
class EncodingConfig:
    pos_freqs: int = 6
    view_freqs: int = 4
    pose_freqs: int = 2
    motion_width: int = 8
    hidden: tuple[int, ...] = (64, 64)
    view_encoding: str = "frequency"   # or "sh": degree-2 SH basis of the view direction

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("pos_freqs", "view_freqs", "pose_freqs", "motion_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.view_encoding not in ("frequency", "sh"):
            raise ValueError(f"unknown view_encoding {self.view_encoding!r}")


def positional_encoding(x, L: int) -> np.ndarray:
    """[sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)] per component."""
    x = np.asarray(x, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(L)
    ang = x[..., :, None] * freqs                       # (..., d, L)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., d, L, 2)
    return out.reshape(x.shape[:-1] + (x.shape[-1] * 2 * L,))


def positional_encoding_backward(x, L: int, grad_out) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    freqs = np.pi * 2.0 ** np.arange(L)
    ang = x[..., :, None] * freqs
    g = grad_out.reshape(x.shape + (L, 2))
    return np.sum(freqs * (g[..., 0] * np.cos(ang) - g[..., 1] * np.sin(ang)), axis=-1)


def sh_basis(dirs) -> np.ndarray:
    """Real SH basis up to degree 2, (N, 9)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * z * z - x * x - y * y),
        SH_C2[3] * x * z, SH_C2[4] * (x * x - y * y),
    ], axis=1)


def sh_basis_backward(dirs, grad_basis) -> np.ndarray:
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    g = grad_basis
    dx = (-SH_C1 * g[:, 3] + SH_C2[0] * y * g[:, 4] - 2 * SH_C2[2] * x * g[:, 6]
          + SH_C2[3] * z * g[:, 7] + 2 * SH_C2[4] * x * g[:, 8])
    dy = (-SH_C1 * g[:, 1] + SH_C2[0] * x * g[:, 4] + SH_C2[1] * z * g[:, 5]
          - 2 * SH_C2[2] * y * g[:, 6] - 2 * SH_C2[4] * y * g[:, 8])
    dz = (SH_C1 * g[:, 2] + SH_C2[1] * y * g[:, 5] + 4 * SH_C2[2] * z * g[:, 6] + SH_C2[3] * x * g[:, 7])
    return np.stack([dx, dy, dz], axis=1)


def sh_color(sh_coeffs, dirs, degree: int = 2):
    """Colors clip(SH . coeffs + 0.5, 0, 1); returns (colors, pre-clip values)."""
    n_basis = (degree + 1) ** 2
    basis = sh_basis(dirs)[:, :n_basis]
    raw = np.einsum("nk,nkc->nc", basis, np.asarray(sh_coeffs)[:, :n_basis]) + 0.5
    return np.clip(raw, 0.0, 1.0), raw


def sh_color_backward(sh_coeffs, dirs, raw, d_colors, degree: int = 2):
    """Gradients wrt SH coefficients and view directions."""
    n_basis = (degree + 1) ** 2
    g = np.where((raw > 0.0) & (raw < 1.0), d_colors, 0.0)
    basis = sh_basis(dirs)
    d_coeffs = np.zeros_like(np.asarray(sh_coeffs, dtype=np.float64))
    d_coeffs[:, :n_basis] = basis[:, :n_basis, None] * g[:, None, :]
    g_basis = np.zeros((len(g), 9))
    g_basis[:, :n_basis] = np.einsum("nkc,nc->nk", np.asarray(sh_coeffs)[:, :n_basis], g)
    return d_coeffs, sh_basis_backward(dirs, g_basis)


def motion_inputs(g: SpacetimeGaussians) -> np.ndarray:
    return np.concatenate([g.motion_coeffs.reshape(len(g), -1), g.rot_coeffs.reshape(len(g), -1)], axis=1)


class ColorMLP:
    """input -> hidden (ReLU) ... -> 3 (sigmoid); owns the motion-feature projection too."""

    def __init__(self, params: dict[str, np.ndarray], enc: EncodingConfig):
        self.params = params
        self.enc = enc

    @staticmethod
    def input_dim(enc: EncodingConfig, motion_dim: int, pose_dim: int, feat_dim: int) -> int:
        view = 9 if enc.view_encoding == "sh" else 3 * 2 * enc.view_freqs
        return (3 * 2 * enc.pos_freqs + enc.motion_width + pose_dim * 2 * enc.pose_freqs
                + view + feat_dim)

    @classmethod
    def init(cls, enc: EncodingConfig, motion_dim: int, pose_dim: int, feat_dim: int,
             rng: np.random.Generator) -> "ColorMLP":
        sizes = [cls.input_dim(enc, motion_dim, pose_dim, feat_dim), *enc.hidden, 3]
        p = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(2.0 / a) if i < len(sizes) - 2 else np.sqrt(1.0 / a)
            p[f"W{i}"] = rng.normal(0.0, scale, size=(a, b))
            p[f"b{i}"] = np.zeros(b)
        p["Wm"] = rng.normal(0.0, 1.0 / np.sqrt(max(motion_dim, 1)), size=(motion_dim, enc.motion_width))
        p["bm"] = np.zeros(enc.motion_width)
        return cls(p, enc)

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.params if k.startswith("W") and k[1:].isdigit())

    @property
    def layer_sizes(self) -> list[int]:
        return [self.params["W0"].shape[0]] + [self.params[f"W{i}"].shape[1] for i in range(self.n_layers)]

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ColorMLP":
        return ColorMLP({k: v.copy() for k, v in self.params.items()}, self.enc)

    def motion_feature(self, g: SpacetimeGaussians) -> np.ndarray:
        return motion_inputs(g) @ self.params["Wm"] + self.params["bm"]

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        n = self.n_layers
        for i in range(n):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = np.maximum(z, 0.0) if i < n - 1 else sigmoid(z)
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out):
        """Gradients of the MLP weights and of its input rows."""
        grads = {}
        n = self.n_layers
        out = acts[-1]
        dz = d_out * out * (1.0 - out)
        for i in range(n - 1, -1, -1):
            grads[f"W{i}"] = acts[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"W{i}"].T
            if i > 0:
                dz = dh * (acts[i] > 0.0)
        return grads, dh


@dataclass
class ColorCache:
    positions: np.ndarray
    view_dirs: np.ndarray
    motion_in: np.ndarray
    acts: list
    splits: tuple


def encode_pose(pose_vec, L: int) -> np.ndarray:
    return positional_encoding(np.asarray(pose_vec, dtype=np.float64).reshape(1, -1), L)[0]


def color_forward(g: SpacetimeGaussians, positions, pose_vec, view_dirs, mlp: ColorMLP):
    """Colors in (0, 1) for every splat and the cache needed by ``color_backward``."""
    enc = mlp.enc
    n = len(g)
    m_in = motion_inputs(g)
    parts = [
        positional_encoding(positions, enc.pos_freqs),
        m_in @ mlp.params["Wm"] + mlp.params["bm"],
        np.broadcast_to(encode_pose(pose_vec, enc.pose_freqs), (n, len(pose_vec) * 2 * enc.pose_freqs)),
        sh_basis(view_dirs) if enc.view_encoding == "sh" else positional_encoding(view_dirs, enc.view_freqs),
        g.appearance_feat,
    ]
    splits = tuple(np.cumsum([p.shape[1] for p in parts])[:-1])
    x = np.concatenate(parts, axis=1)
    colors, acts = mlp.forward(x)
    return colors, ColorCache(np.asarray(positions), np.asarray(view_dirs), m_in, acts, splits)


def color_backward(cache: ColorCache, d_colors, mlp: ColorMLP, n_p: int):
    """Returns (mlp grads, d positions, d view dirs, d motion_coeffs, d rot_coeffs, d features)."""
    enc = mlp.enc
    grads, dx = mlp.backward(cache.acts, d_colors)
    d_pos_enc, d_fmot, _, d_view_enc, d_feat = np.split(dx, cache.splits, axis=1)
    grads["Wm"] = cache.motion_in.T @ d_fmot
    grads["bm"] = d_fmot.sum(axis=0)
    d_min = d_fmot @ mlp.params["Wm"].T
    n = len(d_colors)
    d_motion = d_min[:, :3 * n_p].reshape(n, n_p, 3)
    d_rot = d_min[:, 3 * n_p:].reshape(n, -1, 4)
    d_positions = positional_encoding_backward(cache.positions, enc.pos_freqs, d_pos_enc)
    if enc.view_encoding == "sh":
        d_view = sh_basis_backward(cache.view_dirs, d_view_enc)
    else:
        d_view = positional_encoding_backward(cache.view_dirs, enc.view_freqs, d_view_enc)
    return grads, d_positions, d_view, d_motion, d_rot, d_feat


def view_directions(positions, center) -> np.ndarray:
    v = np.asarray(positions, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def view_directions_backward(positions, center, d_dirs) -> np.ndarray:
    v = np.asarray(positions, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    n = np.linalg.norm(v, axis=1, keepdims=True)
    d = v / n
    return (d_dirs - d * np.sum(d * d_dirs, axis=1, keepdims=True)) / n
