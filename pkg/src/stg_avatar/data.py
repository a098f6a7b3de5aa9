"""Frame datasets on disk: images, cameras, poses, skeleton, flow."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, load_cameras
from .flowdens import read_flo
from .skeleton import Pose, Skeleton, load_poses

IMGF_MAGIC = b"IMGF"
FORMAT_VERSION = 1


class DataError(Exception):
    """Missing or inconsistent dataset contents."""


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_imgf(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(IMGF_MAGIC + struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(img).tobytes())


def read_imgf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != IMGF_MAGIC:
        raise DataError(f"{path}: not an IMGF file")
    h, w, c = struct.unpack("<III", data[4:16])
    if len(data) != 16 + 4 * h * w * c:
        raise DataError(f"{path}: truncated IMGF payload")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).copy()


@dataclass
class FrameDataset:
    images: np.ndarray            # (N, H, W, 3) float64 in [0, 1]
    cameras: list[Camera]
    poses: list[Pose]
    skeleton: Skeleton
    flows: list[np.ndarray]       # N - 1 forward flows, (H, W, 2)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def holdout(self) -> list[int]:
        return [int(k) for k in self.meta.get("holdout", [])]

    @property
    def train_frames(self) -> list[int]:
        held = set(self.holdout)
        return [k for k in range(len(self)) if k not in held]

    def time(self, k: int) -> float:
        n = len(self)
        return k / (n - 1) if n > 1 else 0.0

    def flow_usable(self, k: int) -> bool:
        """Flow k -> k+1 exists and touches no held-out frame."""
        held = set(self.holdout)
        return 0 <= k < len(self.flows) and k not in held and k + 1 not in held

    def validate(self) -> None:
        n = len(self.images)
        if n == 0:
            raise DataError("dataset has no frames")
        if len(self.cameras) != n or len(self.poses) != n:
            raise DataError(f"{n} frames but {len(self.cameras)} cameras / {len(self.poses)} poses")
        if len(self.flows) != n - 1:
            raise DataError(f"expected {n - 1} flow fields, found {len(self.flows)}")
        h, w = self.height, self.width
        for c in self.cameras:
            if (c.height, c.width) != (h, w):
                raise DataError("camera image size does not match frames")
        for f in self.flows:
            if f.shape != (h, w, 2):
                raise DataError(f"flow shape {f.shape} does not match frames {(h, w)}")
        for p in self.poses:
            if len(p.rotations) != len(self.skeleton):
                raise DataError("pose bone count does not match skeleton")
        if any(not 0 <= k < n for k in self.holdout):
            raise DataError("holdout index out of range")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.meta, sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def load_dataset(root) -> FrameDataset:
    root = Path(root)
    try:
        meta = json.loads((root / "meta.json").read_text())
        n = int(meta["N"])
        images = np.stack([read_imgf(root / "frames_raw" / f"{k:04d}.imgf") for k in range(n)]).astype(np.float64)
        flows = [read_flo(root / "flow" / f"{k:04d}.flo").astype(np.float64) for k in range(n - 1)]
        ds = FrameDataset(images, load_cameras(root / "cameras.json"), load_poses(root / "poses.json"),
                          Skeleton.load(root / "skeleton.json"), flows, meta)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot load dataset at {root}: {e}") from e
    ds.validate()
    return ds
