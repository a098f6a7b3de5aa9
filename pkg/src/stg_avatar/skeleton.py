"""Articulated skeleton, forward kinematics and linear blend skinning."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .gauss import quat_to_rotmat

RIGID_TOL = 1e-9


def translation(v) -> np.ndarray:
    T = np.eye(4)
    T[:3, 3] = v
    return T


def rigid(R, t=(0.0, 0.0, 0.0)) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def is_rigid(T: np.ndarray, tol: float = RIGID_TOL) -> bool:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4) or not np.allclose(T[3], (0, 0, 0, 1), atol=tol):
        return False
    R = T[:3, :3]
    return bool(np.abs(R.T @ R - np.eye(3)).max() <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R = T[..., :3, :3]
    out = np.zeros_like(T)
    out[..., :3, :3] = np.swapaxes(R, -1, -2)
    out[..., :3, 3] = -np.einsum("...ji,...j->...i", R, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


@dataclass
class Bone:
    name: str
    parent: int
    rest: np.ndarray                 # 4x4 rigid transform in the parent frame
    tail: np.ndarray = field(default_factory=lambda: np.zeros(3))  # segment end, bone frame
    radius: float = 0.0              # template capsule radius


class Skeleton:
    def __init__(self, bones: list[Bone]):
        if not bones:
            raise ValueError("skeleton has no bones")
        for i, b in enumerate(bones):
            if b.parent >= i or b.parent < -1:
                raise ValueError(f"bone {i} ({b.name}): parent {b.parent} breaks topological order")
            if (b.parent == -1) != (i == 0):
                raise ValueError("exactly the first bone must be the root")
            b.rest = np.asarray(b.rest, dtype=np.float64).reshape(4, 4)
            b.tail = np.asarray(b.tail, dtype=np.float64).reshape(3)
            if not is_rigid(b.rest):
                raise ValueError(f"bone {i} ({b.name}): rest transform is not rigid")
        self.bones = bones
        self.parents = np.array([b.parent for b in bones])
        world = np.zeros((len(bones), 4, 4))
        for i, b in enumerate(bones):
            world[i] = b.rest if b.parent < 0 else world[b.parent] @ b.rest
        self.rest_world = world
        self.rest_world_inv = invert_rigid(world)

    def __len__(self):
        return len(self.bones)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.bones]

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Canonical-space bone segments as (starts, ends), each (B, 3)."""
        starts = self.rest_world[:, :3, 3]
        tails = np.stack([b.tail for b in self.bones])
        ends = np.einsum("bij,bj->bi", self.rest_world[:, :3, :3], tails) + starts
        return starts, ends

    @property
    def radii(self) -> np.ndarray:
        return np.array([b.radius for b in self.bones])

    def to_dict(self) -> dict:
        return {"bones": [{"name": b.name, "parent": int(b.parent),
                           "rest": [float(v) for v in b.rest.reshape(-1)],
                           "tail": [float(v) for v in b.tail],
                           "radius": float(b.radius)} for b in self.bones]}

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        bones = []
        for b in d["bones"]:
            rest = np.asarray(b["rest"], dtype=np.float64)
            if rest.size != 16:
                raise ValueError(f"bone {b.get('name')}: rest must have 16 entries")
            bones.append(Bone(name=b["name"], parent=int(b["parent"]), rest=rest.reshape(4, 4),
                              tail=np.asarray(b.get("tail", (0.0, 0.0, 0.0)), dtype=np.float64),
                              radius=float(b.get("radius", 0.0))))
        return cls(bones)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Pose:
    rotations: np.ndarray          # (B, 4) local unit quaternions, wxyz
    root_translation: np.ndarray   # (3,)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("pose rotations must be unit quaternions")

    @classmethod
    def rest(cls, n_bones: int) -> "Pose":
        rot = np.zeros((n_bones, 4))
        rot[:, 0] = 1.0
        return cls(rot, np.zeros(3))

    def to_dict(self) -> dict:
        return {"rotations": self.rotations.tolist(), "root_translation": self.root_translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotations"], dtype=np.float64), np.asarray(d["root_translation"]))


def save_poses(path, poses: list[Pose]) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in poses]))


def load_poses(path) -> list[Pose]:
    return [Pose.from_dict(d) for d in json.loads(Path(path).read_text())]


@dataclass
class SkinningWeights:
    indices: np.ndarray   # (N, K) bone indices
    weights: np.ndarray   # (N, K), rows sum to one

    def __len__(self):
        return len(self.indices)

    def subset(self, idx) -> "SkinningWeights":
        return SkinningWeights(self.indices[idx].copy(), self.weights[idx].copy())

    def concat(self, other: "SkinningWeights") -> "SkinningWeights":
        return SkinningWeights(np.concatenate([self.indices, other.indices]),
                               np.concatenate([self.weights, other.weights]))

    def dominant(self) -> np.ndarray:
        """Bone index carrying the largest weight for each point."""
        return self.indices[np.arange(len(self)), np.argmax(self.weights, axis=1)]

    def dense(self, n_bones: int) -> np.ndarray:
        out = np.zeros((len(self), n_bones))
        np.add.at(out, (np.arange(len(self))[:, None], self.indices), self.weights)
        return out


def forward_kinematics(skel: Skeleton, pose: Pose) -> np.ndarray:
    """Per-bone (B, 4, 4) transforms taking canonical points to posed space."""
    if len(pose.rotations) != len(skel):
        raise ValueError(f"pose has {len(pose.rotations)} rotations for {len(skel)} bones")
    local = quat_to_rotmat(pose.rotations)
    world = np.zeros((len(skel), 4, 4))
    for i, b in enumerate(skel.bones):
        m = b.rest @ rigid(local[i])
        if b.parent < 0:
            world[i] = translation(pose.root_translation) @ m
        else:
            world[i] = world[b.parent] @ m
    return world @ skel.rest_world_inv


def lbs_transform(x_c: np.ndarray, weights: SkinningWeights, transforms: np.ndarray) -> np.ndarray:
    x_c = np.asarray(x_c, dtype=np.float64).reshape(-1, 3)
    A = blend_transforms(weights, transforms)
    return (A[:, :, :3] @ x_c[:, :, None])[:, :, 0] + A[:, :, 3]


def blend_transforms(weights: SkinningWeights, transforms: np.ndarray) -> np.ndarray:
    """Per-point weighted sum of bone (3, 4) blocks, (N, 3, 4)."""
    return _blend(np.ascontiguousarray(weights.indices, dtype=np.int64),
                  np.ascontiguousarray(weights.weights, dtype=np.float64),
                  np.ascontiguousarray(transforms, dtype=np.float64))


@numba.njit(cache=True)
def _blend(idx, w, T):
    n, k = idx.shape
    A = np.empty((n, 3, 4))
    for i in range(n):
        for r in range(3):
            for c in range(4):
                acc = w[i, 0] * T[idx[i, 0], r, c]
                for j in range(1, k):
                    acc += w[i, j] * T[idx[i, j], r, c]
                A[i, r, c] = acc
    return A


def lbs_jacobian(weights: SkinningWeights, transforms: np.ndarray) -> np.ndarray:
    """d X_L / d x_c = sum_b w_b R_b, (N, 3, 3). Independent of x_c."""
    return np.ascontiguousarray(blend_transforms(weights, transforms)[:, :, :3])


def lbs_backward(x_c, weights: SkinningWeights, transforms, grad_out, n_bones=None):
    """Gradients of X_L wrt canonical positions and wrt each bone's (3, 4) block."""
    x_c = np.asarray(x_c, dtype=np.float64).reshape(-1, 3)
    grad_x = np.einsum("nij,ni->nj", lbs_jacobian(weights, transforms), grad_out)
    n_bones = len(transforms) if n_bones is None else n_bones
    xh = np.concatenate([x_c, np.ones((len(x_c), 1))], axis=1)
    per = np.einsum("nk,ni,nj->nkij", weights.weights, grad_out, xh)
    grad_T = np.zeros((n_bones, 3, 4))
    np.add.at(grad_T, weights.indices, per)
    return grad_x, grad_T


def point_segment_dist2(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Squared distances (N, B) from points to segments."""
    d = ends - starts
    len2 = np.einsum("bi,bi->b", d, d)
    rel = points[:, None, :] - starts[None]
    u = np.einsum("nbi,bi->nb", rel, d) / np.where(len2 > 0, len2, 1.0)
    u = np.clip(np.where(len2 > 0, u, 0.0), 0.0, 1.0)
    diff = rel - u[..., None] * d[None]
    return np.einsum("nbi,nbi->nb", diff, diff)


def assign_skinning_weights(positions, skel: Skeleton, k: int = 4,
                            sharpness: float = 50.0) -> SkinningWeights:
    if len(skel) == 0:
        raise ValueError("empty skeleton")
    if k < 1:
        raise ValueError("k must be >= 1")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    k = min(k, len(skel))
    d2 = point_segment_dist2(positions, *skel.segments())
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    near = np.take_along_axis(d2, idx, axis=1)
    w = np.exp(-sharpness * (near - near[:, :1]))
    w /= w.sum(axis=1, keepdims=True)
    return SkinningWeights(idx, w)
