"""Binary checkpoints: fixed header, little-endian float32 payload, JSON sidecar."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .appearance import ColorMLP, EncodingConfig
from .gauss import SH_COEFFS, SpacetimeGaussians
from .model import COLOR_MODES, AvatarModel
from .skeleton import SkinningWeights

MAGIC = b"STGA"
VERSION = 1
FIELDS = ("canonical_pos", "motion_coeffs", "temporal_center_pos", "rot_coeffs", "temporal_center_rot",
          "log_scales", "opacity_logit", "temporal_sharpness", "appearance_feat", "sh_coeffs")


class CheckpointError(Exception):
    """Unreadable, truncated or incompatible checkpoint."""


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _field_shapes(n, n_p, n_q, feat):
    return {"canonical_pos": (n, 3), "motion_coeffs": (n, n_p, 3), "temporal_center_pos": (n,),
            "rot_coeffs": (n, n_q + 1, 4), "temporal_center_rot": (n,), "log_scales": (n, 3),
            "opacity_logit": (n,), "temporal_sharpness": (n,), "appearance_feat": (n, feat),
            "sh_coeffs": (n, SH_COEFFS, 3)}


def _mlp_names(n_layers: int) -> list[str]:
    return [f"{p}{i}" for i in range(n_layers) for p in ("W", "b")] + ["Wm", "bm"]


def to_bytes(model: AvatarModel) -> bytes:
    g, mlp = model.gaussians, model.mlp
    n, k = len(g), model.skin.indices.shape[1]
    sizes = mlp.layer_sizes
    wm = mlp.params["Wm"]
    head = [VERSION, n, g.n_p, g.n_q, g.feat_dim, mlp.n_layers, *sizes, wm.shape[0], wm.shape[1], k,
            COLOR_MODES.index(model.color_mode), model.sh_degree]
    parts = [MAGIC, struct.pack(f"<{len(head)}I", *head)]
    for name in FIELDS:
        parts.append(np.ascontiguousarray(getattr(g, name), dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(model.skin.indices, dtype="<i4").tobytes())
    parts.append(np.ascontiguousarray(model.skin.weights, dtype="<f4").tobytes())
    for name in _mlp_names(mlp.n_layers):
        parts.append(np.ascontiguousarray(mlp.params[name], dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def u32(self, count: int) -> tuple[int, ...]:
        end = self.pos + 4 * count
        if end > len(self.data):
            raise CheckpointError("truncated header")
        vals = struct.unpack_from(f"<{count}I", self.data, self.pos)
        self.pos = end
        return vals

    def array(self, dtype: str, shape) -> np.ndarray:
        size = int(np.prod(shape)) * 4
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated payload")
        a = np.frombuffer(self.data, dtype=dtype, count=int(np.prod(shape)), offset=self.pos).reshape(shape)
        self.pos += size
        return a


def from_bytes(data: bytes, enc: EncodingConfig) -> AvatarModel:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    r = _Reader(data)
    r.pos = 4
    (version,) = r.u32(1)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    n, n_p, n_q, feat, n_layers = r.u32(5)
    if n_layers < 1:
        raise CheckpointError("color head needs at least one layer")
    sizes = r.u32(n_layers + 1)
    m_in, m_out, k, mode, sh_degree = r.u32(5)
    if mode >= len(COLOR_MODES):
        raise CheckpointError(f"unknown color mode {mode}")
    shapes = _field_shapes(n, n_p, n_q, feat)
    arrays = {name: r.array("<f4", shapes[name]).astype(np.float64) for name in FIELDS}
    indices = r.array("<i4", (n, k)).astype(np.int64)
    weights = r.array("<f4", (n, k)).astype(np.float64)
    params = {}
    for i in range(n_layers):
        params[f"W{i}"] = r.array("<f4", (sizes[i], sizes[i + 1])).astype(np.float64)
        params[f"b{i}"] = r.array("<f4", (sizes[i + 1],)).astype(np.float64)
    params["Wm"] = r.array("<f4", (m_in, m_out)).astype(np.float64)
    params["bm"] = r.array("<f4", (m_out,)).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after payload")
    g = SpacetimeGaussians(**arrays)
    return AvatarModel(g, SkinningWeights(indices, weights), ColorMLP(params, enc), COLOR_MODES[mode], sh_degree)


def save(path, model: AvatarModel, sidecar: dict) -> None:
    path = Path(path)
    path.write_bytes(to_bytes(model))
    sidecar = dict(sidecar)
    sidecar["format_version"] = VERSION
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load(path) -> tuple[AvatarModel, dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
        meta = json.loads(sidecar_path(path).read_text())
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    enc = EncodingConfig(**meta.get("config", {}).get("encoding", {}))
    return from_bytes(data, enc), meta
