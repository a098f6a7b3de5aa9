"""Synthetic capsule-limb figure: exact poses, cameras, images and optical flow."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import NEAR, Camera, look_at, save_cameras
from .data import FORMAT_VERSION, DataError, FrameDataset, write_imgf, write_png
from .deform import frame_time
from .flowdens import write_flo
from .gauss import PosedGaussians, covariance_from_rotmat
from .metrics import psnr, ssim
from .render import project, render_oracle
from .skeleton import (Bone, Pose, Skeleton, SkinningWeights, assign_skinning_weights,
                       forward_kinematics, lbs_transform, save_poses, translation)

SKIN_K = 4
SKIN_SHARPNESS = 50.0
HOLDOUT_STRIDE = 6
HOLDOUT_PHASE = 3
BACKGROUND = (0.0, 0.0, 0.0)

# name, parent, head offset in parent frame, tail in own frame, radius, base color, non-rigid amplitude
_BONES = [
    ("pelvis", -1, (0.0, 0.0, 0.0), (0.0, 0.3, 0.0), 0.30, (0.85, 0.75, 0.20), 0.05),
    ("torso", 0, (0.0, 0.3, 0.0), (0.0, 0.8, 0.0), 0.36, (0.90, 0.30, 0.25), 0.08),
    ("head", 1, (0.0, 1.05, 0.0), (0.0, 0.25, 0.0), 0.24, (0.95, 0.80, 0.65), 0.0),
    ("l_upper_arm", 1, (0.45, 0.7, 0.0), (0.75, 0.0, 0.0), 0.18, (0.25, 0.55, 0.90), 0.04),
    ("l_forearm", 3, (0.8, 0.0, 0.0), (0.7, 0.0, 0.0), 0.16, (0.30, 0.85, 0.40), 0.12),
    ("r_upper_arm", 1, (-0.45, 0.7, 0.0), (-0.75, 0.0, 0.0), 0.18, (0.70, 0.35, 0.85), 0.04),
    ("r_forearm", 5, (-0.8, 0.0, 0.0), (-0.7, 0.0, 0.0), 0.16, (0.95, 0.55, 0.15), 0.12),
    ("l_leg", 0, (0.2, -0.05, 0.0), (0.0, -1.5, 0.0), 0.20, (0.20, 0.70, 0.75), 0.06),
    ("r_leg", 0, (-0.2, -0.05, 0.0), (0.0, -1.5, 0.0), 0.20, (0.60, 0.60, 0.65), 0.06),
]
CHECKER = 0.3          # world units along the bone axis
CHECKER_SECTORS = 8
CHECKER_DARK = 0.55
POINTS_PER_UNIT_AREA = 150.0
GT_OPACITY = 0.95
CAM_RADIUS = 10.0
CAM_TARGET = (0.0, 0.05, 0.0)
CAM_SWEEP_DEG = 20.0
FOCAL_PER_PIXEL = 125.0 / 64.0


def build_skeleton() -> Skeleton:
    return Skeleton([Bone(n, p, translation(h), np.array(tl, dtype=np.float64), r)
                     for n, p, h, tl, r, _, _ in _BONES])


def _axis_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def script_pose(t: float, static: bool = False) -> Pose:
    """Joint rotations at normalized time ``t``: swinging arms, small leg and head motion."""
    rot = np.zeros((len(_BONES), 4))
    rot[:, 0] = 1.0
    if not static:
        s = 2.0 * np.pi * t
        z, x = (0.0, 0.0, 1.0), (1.0, 0.0, 0.0)
        rot[2] = _axis_quat(x, np.radians(5.0) * np.sin(s))
        rot[3] = _axis_quat(z, np.radians(-40.0 + 45.0 * np.sin(s)))
        rot[4] = _axis_quat(z, np.radians(30.0 + 30.0 * np.sin(s + 1.0)))
        rot[5] = _axis_quat(z, np.radians(40.0 - 45.0 * np.sin(s + 0.7)))
        rot[6] = _axis_quat(z, np.radians(-30.0 - 30.0 * np.sin(s + 1.7)))
        rot[7] = _axis_quat(z, np.radians(6.0) * np.sin(s))
        rot[8] = _axis_quat(z, np.radians(-6.0) * np.sin(s))
    return Pose(rot, np.zeros(3))


def orbit_camera(t: float, height: int, width: int) -> Camera:
    az = np.radians(CAM_SWEEP_DEG) * (t - 0.5)
    target = np.asarray(CAM_TARGET)
    eye = target + CAM_RADIUS * np.array([np.sin(az), 0.0, np.cos(az)])
    f = FOCAL_PER_PIXEL * min(height, width)
    return Camera(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height, look_at(eye, target))


def _basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = axis / np.linalg.norm(axis)
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(a, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(a, e1)


def sample_capsules(skel: Skeleton, n_total: int | None, rng: np.random.Generator,
                    density: float = POINTS_PER_UNIT_AREA):
    """Area-uniform samples on every bone's capsule in the rest pose.

    Returns (points, normals, bone index, axial coordinate in world units,
    angle around the axis, fraction along the bone).
    """
    starts, ends = skel.segments()
    radii = skel.radii
    lengths = np.linalg.norm(ends - starts, axis=1)
    areas = 2 * np.pi * radii * lengths + 4 * np.pi * radii ** 2
    if n_total is None:
        counts = np.maximum(np.rint(areas * density).astype(int), 1)
    else:
        counts = np.floor(n_total * areas / areas.sum()).astype(int)
        counts[: n_total - counts.sum()] += 1
    pts, nrm, bone, axial, ang, frac = [], [], [], [], [], []
    for b, n in enumerate(counts):
        r, L = radii[b], lengths[b]
        axis = (ends[b] - starts[b]) / L
        e1, e2 = _basis(axis)
        u = rng.random(n) * (L + 2 * r) - r     # signed axial coordinate; caps beyond [0, L]
        phi = rng.random(n) * 2 * np.pi
        # cap points: uniform on hemisphere via uniform height
        cap = (u < 0) | (u > L)
        h = np.clip(u, 0.0, L)
        depth = np.where(u < 0, -u, np.where(u > L, u - L, 0.0))
        sin_el = np.where(cap, depth / r, 0.0)
        cos_el = np.sqrt(np.maximum(1.0 - sin_el ** 2, 0.0))
        sign = np.where(u < 0, -1.0, 1.0)
        radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        normal = cos_el[:, None] * radial + (sign * sin_el)[:, None] * axis
        pts.append(starts[b] + h[:, None] * axis + r * normal)
        nrm.append(normal)
        bone.append(np.full(n, b))
        axial.append(u)
        ang.append(phi)
        frac.append(np.clip(u / L, 0.0, 1.0))
    return (np.concatenate(pts), np.concatenate(nrm), np.concatenate(bone),
            np.concatenate(axial), np.concatenate(ang), np.concatenate(frac))


def checker_colors(bone, axial, angle) -> np.ndarray:
    base = np.array([c for *_, c, _ in _BONES])[bone]
    cell = np.floor(axial / CHECKER).astype(int) + np.floor(angle / (2 * np.pi) * CHECKER_SECTORS).astype(int)
    return base * np.where(cell % 2 == 0, 1.0, CHECKER_DARK)[:, None]


@dataclass
class SynthScene:
    skeleton: Skeleton
    points: np.ndarray       # canonical surface samples
    normals: np.ndarray
    colors: np.ndarray
    bone: np.ndarray
    frac: np.ndarray         # position along the bone in [0, 1]
    scales: np.ndarray       # isotropic splat std per point
    poses: list[Pose]
    cameras: list[Camera]
    height: int
    width: int
    seed: int
    nonrigid: bool = True
    skin: SkinningWeights = field(init=False, repr=False)

    def __post_init__(self):
        self.skin = assign_skinning_weights(self.points, self.skeleton, SKIN_K, SKIN_SHARPNESS)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def time(self, k: int) -> float:
        return frame_time(k, self.n_frames)

    def bone_transforms(self, k: int) -> np.ndarray:
        return forward_kinematics(self.skeleton, self.poses[k])

    def posed(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """World positions and rotated normals of every surface point at frame ``k``."""
        T = self.bone_transforms(k)
        x = lbs_transform(self.points, self.skin, T)
        n = np.einsum("nij,nj->ni", T[self.skin.dominant(), :3, :3], self.normals)
        if self.nonrigid:
            amp = np.array([a for *_, a in _BONES])[self.bone]
            x = x + (amp * (0.5 + 0.5 * self.frac) * np.sin(np.pi * self.time(k)))[:, None] * n
        return x, n

    def posed_gaussians(self, k: int) -> PosedGaussians:
        x, _ = self.posed(k)
        n = len(x)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        cov = covariance_from_rotmat(eye, np.log(self.scales)[:, None].repeat(3, axis=1))
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return PosedGaussians(x, cov, np.full(n, GT_OPACITY), np.zeros((n, 0)), rot)

    def render(self, k: int) -> np.ndarray:
        splats = project(self.posed_gaussians(k), self.cameras[k], self.colors)
        return render_oracle(splats, self.cameras[k], BACKGROUND, early_out=True).image

    def front_ids(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Z-buffer of surface points: id of the nearest point covering each pixel and its depth."""
        cam = self.cameras[k]
        x, _ = self.posed(k)
        uv, z = cam.project(x)
        h, w = self.height, self.width
        ids = np.full((h, w), -1, dtype=np.int64)
        zbuf = np.full((h, w), np.inf)
        rad = 2.0 * cam.fx * self.scales / np.maximum(z, NEAR) + 0.5
        for i in np.argsort(-z, kind="stable"):
            if z[i] <= NEAR:
                continue
            r = rad[i]
            x0, x1 = int(np.ceil(uv[i, 0] - r)), int(np.floor(uv[i, 0] + r))
            y0, y1 = int(np.ceil(uv[i, 1] - r)), int(np.floor(uv[i, 1] + r))
            x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w - 1), min(y1, h - 1)
            if x0 > x1 or y0 > y1:
                continue
            yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
            hit = (xx - uv[i, 0]) ** 2 + (yy - uv[i, 1]) ** 2 <= r * r
            ids[yy[hit], xx[hit]] = i
            zbuf[yy[hit], xx[hit]] = z[i]
        return ids, zbuf

    def flow(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Forward flow k -> k+1 from projected point motion, and a non-occluded mask."""
        ids, _ = self.front_ids(k)
        ids_next, z_next = self.front_ids(k + 1)
        x0, _ = self.posed(k)
        x1, _ = self.posed(k + 1)
        uv0, _ = self.cameras[k].project(x0)
        uv1, z1 = self.cameras[k + 1].project(x1)
        disp = uv1 - uv0
        flow = np.zeros((self.height, self.width, 2))
        fg = ids >= 0
        flow[fg] = disp[ids[fg]]
        # a surface pixel stays visible if its point is not behind the next frame's z-buffer
        visible = np.zeros((self.height, self.width), dtype=bool)
        tgt = np.rint(uv1[ids[fg]]).astype(int)
        inb = (tgt[:, 0] >= 0) & (tgt[:, 0] < self.width) & (tgt[:, 1] >= 0) & (tgt[:, 1] < self.height)
        zt = np.full(len(tgt), -np.inf)
        zt[inb] = z_next[tgt[inb, 1], tgt[inb, 0]]
        pt_z = z1[ids[fg]]
        visible[fg] = inb & (pt_z <= zt + 3.0 * self.scales[ids[fg]])
        visible[~fg] = ids_next[~fg] < 0
        return flow, visible


def make_scene(seed: int = 0, frames: int = 24, height: int = 64, width: int = 64,
               static: bool = False, nonrigid: bool = True) -> SynthScene:
    if frames < 2:
        raise ValueError("need at least 2 frames")
    if height < 8 or width < 8:
        raise ValueError("image too small")
    rng = np.random.default_rng(seed)
    skel = build_skeleton()
    pts, nrm, bone, axial, ang, frac = sample_capsules(skel, None, rng)
    spacing = 1.0 / np.sqrt(POINTS_PER_UNIT_AREA)
    scales = np.full(len(pts), 0.6 * spacing)
    times = [frame_time(k, frames) for k in range(frames)]
    poses = [script_pose(t, static) for t in times]
    # a static script also parks the camera so the whole sequence is motionless
    cams = [orbit_camera(0.5 if static else t, height, width) for t in times]
    return SynthScene(skel, pts, nrm, checker_colors(bone, axial, ang), bone, frac, scales,
                      poses, cams, height, width, seed, nonrigid and not static)


def holdout_frames(n_frames: int) -> list[int]:
    return [k for k in range(n_frames) if k % HOLDOUT_STRIDE == HOLDOUT_PHASE]


def scene_dataset(scene: SynthScene) -> FrameDataset:
    n = scene.n_frames
    images = np.stack([scene.render(k) for k in range(n)]).astype(np.float32).astype(np.float64)
    flows = [scene.flow(k)[0].astype(np.float32).astype(np.float64) for k in range(n - 1)]
    meta = {"version": FORMAT_VERSION, "N": n, "H": scene.height, "W": scene.width,
            "seed": scene.seed, "holdout": holdout_frames(n), "background": list(BACKGROUND)}
    return FrameDataset(images, list(scene.cameras), list(scene.poses), scene.skeleton, flows, meta)


def write_dataset(ds: FrameDataset, out) -> None:
    out = Path(out)
    try:
        for sub in ("frames", "frames_raw", "flow"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(ds.images):
            write_png(out / "frames" / f"{k:04d}.png", img)
            write_imgf(out / "frames_raw" / f"{k:04d}.imgf", img)
        for k, f in enumerate(ds.flows):
            write_flo(out / "flow" / f"{k:04d}.flo", f)
        save_cameras(out / "cameras.json", ds.cameras)
        save_poses(out / "poses.json", ds.poses)
        ds.skeleton.save(out / "skeleton.json")
        (out / "meta.json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DataError(f"cannot write dataset to {out}: {e}") from e


def generate(seed: int, frames: int, height: int, width: int, out=None, **scene_kw) -> FrameDataset:
    """Build the default scene and, when ``out`` is given, write it to disk."""
    ds = scene_dataset(make_scene(seed, frames, height, width, **scene_kw))
    if out is not None:
        write_dataset(ds, out)
    return ds


def eval_holdout(render_fn, ds: FrameDataset, frames=None) -> dict[str, float]:
    """Mean PSNR/SSIM of ``render_fn(k)`` against the dataset's held-out frames."""
    frames = ds.holdout if frames is None else list(frames)
    if not frames:
        raise DataError("no held-out frames to evaluate")
    if any(not 0 <= k < len(ds) for k in frames):
        raise DataError(f"held-out frame outside 0..{len(ds) - 1}")
    ps, ss = [], []
    for k in frames:
        # frames are stored as float32; compare at that precision
        img = np.clip(render_fn(k), 0.0, 1.0).astype(np.float32).astype(np.float64)
        ps.append(psnr(img, ds.images[k]))
        ss.append(ssim(img, ds.images[k]))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


__all__ = ["SynthScene", "build_skeleton", "eval_holdout", "generate", "holdout_frames",
           "make_scene", "orbit_camera", "scene_dataset", "script_pose", "write_dataset"]
