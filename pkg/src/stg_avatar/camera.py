"""Pinhole camera with world-to-camera extrinsics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .skeleton import invert_rigid, is_rigid

NEAR = 0.01


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not is_rigid(self.world_to_camera):
            raise ValueError("world_to_camera must be a rigid transform")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return invert_rigid(self.world_to_camera)[:3, 3]

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def project(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (N, 2) and camera depth (N,). Pixel centers sit on integers."""
        p = self.to_camera(np.asarray(X, dtype=np.float64).reshape(-1, 3))
        z = p[:, 2]
        zs = np.where(np.abs(z) > 1e-12, z, 1e-12)
        uv = np.stack([self.fx * p[:, 0] / zs + self.cx, self.fy * p[:, 1] / zs + self.cy], axis=1)
        return uv, z

    def project_jacobian(self, X: np.ndarray) -> np.ndarray:
        """d(pixel)/d(world point), (N, 2, 3)."""
        p = self.to_camera(np.asarray(X, dtype=np.float64).reshape(-1, 3))
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        J = np.zeros((len(p), 2, 3))
        J[:, 0, 0] = self.fx / z
        J[:, 0, 2] = -self.fx * x / (z * z)
        J[:, 1, 1] = self.fy / z
        J[:, 1, 2] = -self.fy * y / (z * z)
        return J @ self.R

    def pixel_direction_to_world(self, direction_px: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Lift 2D pixel-space directions to unit world directions parallel to the image plane."""
        d = np.asarray(direction_px, dtype=np.float64).reshape(-1, 2)
        depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), (len(d),))
        cam = np.stack([d[:, 0] * depth / self.fx, d[:, 1] * depth / self.fy, np.zeros(len(d))], axis=1)
        world = cam @ self.R  # R^T applied to row vectors
        n = np.linalg.norm(world, axis=1, keepdims=True)
        return world / np.where(n > 0, n, 1.0)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "world_to_camera": self.world_to_camera.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.asarray(d["world_to_camera"]).reshape(4, 4))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    Camera axes: +z forward, +x right, +y down (image rows grow downward).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def save_cameras(path, cams: list[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams]))


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]
