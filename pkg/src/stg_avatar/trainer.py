"""Joint optimization: photometric, flow, temporal and regularization terms with flow-guided density control."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .appearance import ColorMLP, EncodingConfig
from .camera import NEAR
from .config import RunConfig, TrainConfig
from .data import DataError, FrameDataset
from .deform import DeformContext, deform_backward, posed_positions
from .flowdens import (DensifyConfig, check_consistency, density_report, density_trigger, detect_dynamic,
                       max_temporal_opacity, motion_strength, moving_static_density_ratio, prune,
                       sample_along_flow, sample_flow, update_strikes, valid_region)
from .gauss import PosedGrads, SpacetimeGaussians
from .losses import LossBreakdown, adaptive_weights, loss_flow, loss_reg, loss_rgb, loss_temp
from .metrics import psnr
from .model import AvatarModel, render_frame, render_frame_backward
from .optim import AdamState, adam_step, remap_state
from .skeleton import SkinningWeights, assign_skinning_weights, lbs_jacobian
from .synth import sample_capsules

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "rgb", "flow", "temp", "reg", "lambda1", "lambda2", "lambda3",
              "total", "splat_count", "psnr_train")
SPLAT_LR = {"canonical_pos": "lr_position", "motion_coeffs": "lr_motion", "rot_coeffs": "lr_rotation",
            "log_scales": "lr_scale", "opacity_logit": "lr_opacity", "appearance_feat": "lr_feature",
            "sh_coeffs": "lr_sh"}
SPLAT_FIELDS = ("canonical_pos", "motion_coeffs", "temporal_center_pos", "rot_coeffs", "temporal_center_rot",
                "log_scales", "opacity_logit", "temporal_sharpness", "appearance_feat", "sh_coeffs")


class NumericError(RuntimeError):
    """Training produced non-finite losses for too many consecutive iterations."""


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def round_model(model: AvatarModel) -> None:
    """Snap every float parameter to float32 so checkpoints hold it exactly."""
    g = model.gaussians
    for name in SPLAT_FIELDS:
        setattr(g, name, _f32(getattr(g, name)))
    model.skin = SkinningWeights(model.skin.indices, _f32(model.skin.weights))
    model.mlp.params = {k: _f32(v) for k, v in model.mlp.params.items()}


def init_model(ds: FrameDataset, cfg: TrainConfig, enc: EncodingConfig) -> AvatarModel:
    """Splats sampled on the skeleton's template capsules, bound by distance-based skinning."""
    rng = np.random.default_rng(cfg.seed)
    skel = ds.skeleton
    if np.all(skel.radii <= 0):
        raise DataError("skeleton has no template radii to sample an initial surface from")
    pts, *_ = sample_capsules(skel, cfg.init_count, rng)
    pts = pts + rng.normal(0.0, cfg.init_jitter, size=pts.shape)
    starts, ends = skel.segments()
    area = np.sum(2 * np.pi * skel.radii * np.linalg.norm(ends - starts, axis=1) + 4 * np.pi * skel.radii ** 2)
    scale = cfg.init_scale if cfg.init_scale > 0 else 0.7 * np.sqrt(area / cfg.init_count)
    g = SpacetimeGaussians.create(pts, log_scale=np.log(scale), opacity=cfg.init_opacity, t_center=0.0)
    g.appearance_feat = rng.normal(0.0, cfg.feature_init_std, size=g.appearance_feat.shape)
    skin = assign_skinning_weights(pts, skel, cfg.skin_k, cfg.skin_sharpness)
    motion_dim = g.motion_coeffs[0].size + g.rot_coeffs[0].size
    mlp = ColorMLP.init(enc, motion_dim, 4 * len(skel), g.feat_dim, rng)
    model = AvatarModel(g, skin, mlp, "sh" if cfg.mode == "sh" else "mlp")
    round_model(model)
    return model


@dataclass
class TrainResult:
    model: AvatarModel
    rows: list[dict]
    breakdowns: list[LossBreakdown] = field(default_factory=list)
    skipped_tensors: int = 0
    added: int = 0
    removed: int = 0
    flagged: int = 0


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["iteration"], *(repr(float(r[k])) for k in LOG_FIELDS[1:-2]),
                        r["splat_count"], repr(float(r["psnr_train"]))])


class Trainer:
    def __init__(self, ds: FrameDataset, run: RunConfig, model: AvatarModel | None = None):
        ds.validate()
        if not ds.train_frames:
            raise DataError("no training frames left after removing the holdout")
        self.ds = ds
        self.cfg = run.train
        self.dens = run.densify
        self.enc = run.encoding
        self.model = model if model is not None else init_model(ds, self.cfg, self.enc)
        self.skel = ds.skeleton
        self.state = AdamState()
        n = len(self.model)
        self.init_count = n
        self.strikes = np.zeros(n, dtype=np.int64)
        self.born = np.zeros(n, dtype=bool)        # created by flow-guided sampling
        self.contrib = np.zeros(n)
        self.contrib_iters = 0
        self.ema = None
        self.bad_streak = 0
        usable = [k for k in ds.train_frames if ds.flow_usable(k)]
        spread = sorted(range(len(usable)), key=lambda i: (i * 0.6180339887498949) % 1.0)
        self.densify_frames = [usable[i] for i in spread]
        self.densify_events = 0
        self.stats = {"added": 0, "removed": 0, "flagged": 0}
        self.breakdowns: list[LossBreakdown] = []
        self._precompute_regions()

    # ------------------------------------------------------------ setup

    def _usable_history(self, k: int) -> list[np.ndarray]:
        lo = max(0, k - self.dens.window)
        return [self.ds.flows[j] for j in range(lo, k + 1) if self.ds.flow_usable(j)]

    def _precompute_regions(self) -> None:
        h, w = self.ds.height, self.ds.width
        self.region, self.strength = [], []
        for k in range(len(self.ds)):
            hist = self._usable_history(k)
            if hist:
                self.region.append(valid_region(hist, len(hist) - 1, self.dens.delta))
                self.strength.append(motion_strength(hist, len(hist) - 1, self.dens.delta))
            else:
                self.region.append(np.zeros((h, w), dtype=bool))
                self.strength.append(np.zeros((h, w)))

    def _ctx(self, k: int) -> DeformContext:
        return DeformContext(self.skel, self.ds.poses[k], self.ds.time(k), self.model.skin)

    def _learning_rates(self) -> dict:
        c = self.cfg
        lr = {name: getattr(c, attr) for name, attr in SPLAT_LR.items()}
        if c.mode == "no-stg":
            lr["motion_coeffs"] = 0.0
        lr["sh_coeffs" if self.model.color_mode == "mlp" else "appearance_feat"] = 0.0
        for name in self.model.mlp.params:
            lr["mlp." + name] = c.lr_mlp if self.model.color_mode == "mlp" else 0.0
        return lr

    def _params(self) -> dict:
        g = self.model.gaussians
        p = {name: getattr(g, name) for name in SPLAT_LR}
        p.update({"mlp." + k: v for k, v in self.model.mlp.params.items()})
        return p

    # ------------------------------------------------------------ one iteration

    def frame_for(self, it: int) -> int:
        tf = self.ds.train_frames
        return tf[it % len(tf)]

    def step(self, it: int) -> dict:
        cfg, ds, model = self.cfg, self.ds, self.model
        g = model.gaussians
        k = self.frame_for(it)
        gt = ds.images[k]
        cam = ds.cameras[k]
        fr = render_frame(model, self.skel, ds.poses[k], ds.time(k), cam, cfg.background)
        rgb, d_img = loss_rgb(fr.image, gt, cfg.lambda_ssim)

        # per-splat compositing weight, indexed by splat row
        weights = np.zeros(len(g))
        np.add.at(weights, fr.splats.source, fr.out.splat_weights)

        flow_val, flow_grads, pos_grad_k = None, None, None
        if ds.flow_usable(k):
            flow_val, pos_grad_k, flow_grads = self._flow_term(k, fr.posed.positions, weights)

        temp_val, d_temp = None, None
        if k >= 1 and ds.flow_usable(k - 1):
            prev = render_frame(model, self.skel, ds.poses[k - 1], ds.time(k - 1), ds.cameras[k - 1],
                                cfg.background).image
            temp_val, d_temp = loss_temp(fr.image, prev, ~self.region[k - 1])

        reg_val, reg_grads = loss_reg(g)
        lam = self._update_weights(rgb, flow_val, temp_val, reg_val)
        bd = LossBreakdown(rgb, flow_val or 0.0, temp_val or 0.0, reg_val, lam)
        total = bd.total

        if not np.isfinite(total):
            self.bad_streak += 1
            if self.bad_streak >= cfg.nonfinite_patience:
                raise NumericError(f"non-finite loss for {self.bad_streak} consecutive iterations")
            return self._row(it, bd, len(g), fr.image, gt)
        self.bad_streak = 0
        self.breakdowns.append(bd)

        d_total = d_img if d_temp is None else d_img + lam[1] * d_temp
        extra = None if pos_grad_k is None else lam[0] * pos_grad_k
        grads, mlp_grads = render_frame_backward(model, fr, d_total, extra)
        if flow_grads is not None:
            for name, v in flow_grads.items():
                grads[name] = grads[name] + lam[0] * v
        for name, v in reg_grads.items():
            grads[name] = grads[name] + lam[2] * v
        if cfg.mode == "no-stg":
            grads["motion_coeffs"] = np.zeros_like(g.motion_coeffs)
            grads["rot_coeffs"][:, 1:] = 0.0
        all_grads = {name: grads[name] for name in SPLAT_LR}
        all_grads.update({"mlp." + n: v for n, v in mlp_grads.items()})
        adam_step(self._params(), all_grads, self.state, self._learning_rates(),
                  cfg.beta1, cfg.beta2, cfg.eps)
        if cfg.mode == "no-stg":
            g.motion_coeffs[:] = 0.0
            g.rot_coeffs[:, 1:] = 0.0

        self.contrib += weights
        self.contrib_iters += 1
        self._maybe_densify(it)
        return self._row(it, bd, len(model), fr.image, gt)

    def _flow_term(self, k: int, pos_k: np.ndarray, weights: np.ndarray):
        ds, g = self.ds, self.model.gaussians
        cam_k, cam_n = ds.cameras[k], ds.cameras[k + 1]
        pos_n = posed_positions(g, self._ctx(k + 1))
        uv_k, z_k = cam_k.project(pos_k)
        uv_n, z_n = cam_n.project(pos_n)
        v_obs, inside = sample_flow(ds.flows[k], uv_k)
        w = np.where(inside & (z_k > NEAR) & (z_n > NEAR), weights, 0.0)
        val, dv = loss_flow(uv_n - uv_k, v_obs, w)
        grad_k = -np.einsum("nij,ni->nj", cam_k.project_jacobian(pos_k), dv)
        up = PosedGrads.zeros(len(g))
        up.positions = np.einsum("nij,ni->nj", cam_n.project_jacobian(pos_n), dv)
        grads_n = deform_backward(g, self._ctx(k + 1), up)
        return val, grad_k, grads_n

    def _update_weights(self, rgb, flow, temp, reg) -> tuple[float, float, float]:
        vals = [rgb, flow, temp, reg]
        if self.ema is None:
            self.ema = [v if v is not None else None for v in vals]
        else:
            d = self.cfg.ema_decay
            for i, v in enumerate(vals):
                if v is None or not np.isfinite(v):
                    continue
                self.ema[i] = v if self.ema[i] is None else d * self.ema[i] + (1.0 - d) * v
        aux = [e if e is not None else 0.0 for e in self.ema[1:]]
        return adaptive_weights(self.ema[0] or 0.0, aux, self.cfg.ratios)

    def _row(self, it, bd: LossBreakdown, count: int, image, gt) -> dict:
        l1, l2, l3 = bd.lambdas
        return {"iteration": it, "rgb": bd.rgb, "flow": bd.flow, "temp": bd.temp, "reg": bd.reg,
                "lambda1": l1, "lambda2": l2, "lambda3": l3, "total": bd.total, "splat_count": count,
                "psnr_train": psnr(np.clip(image, 0.0, 1.0), gt)}

    # ------------------------------------------------------------ density control

    def _maybe_densify(self, it: int) -> None:
        cfg = self.cfg
        step_no = it + 1
        if not (cfg.densify_from <= step_no <= cfg.densify_until and step_no % cfg.densify_interval == 0):
            return
        if cfg.mode == "no-flow":
            self._opacity_prune()
        elif self.densify_frames:
            # successive passes visit frames spread over the sequence, independent of the iteration's frame
            k = self.densify_frames[self.densify_events % len(self.densify_frames)]
            self.densify_events += 1
            self._flow_densify(it, k)

    def _apply_keep(self, keep: np.ndarray) -> None:
        if keep.all():
            return
        m = self.model
        m.gaussians = m.gaussians.subset(keep)
        m.skin = m.skin.subset(keep)
        self.strikes, self.born, self.contrib = self.strikes[keep], self.born[keep], self.contrib[keep]
        remap_state(self.state, keep, 0, SPLAT_LR)
        self.stats["removed"] += int((~keep).sum())

    def _opacity_prune(self) -> None:
        keep = prune(max_temporal_opacity(self.model.gaussians), self.contrib, np.zeros(len(self.model)),
                     np.zeros(len(self.model), dtype=bool), floor=self.dens.opacity_floor,
                     gamma_flow=self.dens.gamma_flow, budget=None)
        self._apply_keep(keep)
        self.contrib[:] = 0.0
        self.contrib_iters = 0

    def _flow_densify(self, it: int, k: int) -> None:
        ds, dens, model = self.ds, self.dens, self.model
        rng = np.random.default_rng([self.cfg.seed, it])
        cam, cam_n = ds.cameras[k], ds.cameras[k + 1]
        ctx = self._ctx(k)
        fr = render_frame(model, self.skel, ds.poses[k], ds.time(k), cam, self.cfg.background)
        dynamic = detect_dynamic(np.clip(fr.image, 0.0, 1.0), ds.images[k], dens.tau)
        valid, strength = self.region[k], self.strength[k]
        g = model.gaussians
        pos = fr.posed.positions
        uv, z = cam.project(pos)
        report = density_report(uv[z > NEAR], dynamic, valid, strength, dens.cell, dens.kappa)
        weights = np.zeros(len(g))
        np.add.at(weights, fr.splats.source, fr.out.splat_weights)
        allowed = valid & dynamic
        px = np.rint(uv).astype(np.int64)
        on_img = (z > NEAR) & (px[:, 0] >= 0) & (px[:, 0] < ds.width) & (px[:, 1] >= 0) & (px[:, 1] < ds.height)
        ok_px = np.zeros(len(g), dtype=bool)
        ok_px[on_img] = allowed[px[on_img, 1], px[on_img, 0]]

        seeds = []
        cx, cy = px[:, 0] // dens.cell, px[:, 1] // dens.cell
        for j, i in density_trigger(report):
            need = int(np.ceil(report.target[j, i] - report.current[j, i]))
            cand = np.nonzero(ok_px & (cx == i) & (cy == j) & (weights > 0))[0]
            if need <= 0 or len(cand) == 0:
                continue
            order = cand[np.lexsort((cand, -weights[cand]))]
            # cycle through the candidates until the deficit is covered
            seeds.extend(np.resize(order, need).tolist())
        seeds = np.asarray(sorted(seeds), dtype=np.int64)

        n_added = 0
        if len(seeds):
            flow_px, _ = sample_flow(ds.flows[k], uv[seeds])
            jac = lbs_jacobian(model.skin, ctx.transforms)
            new, _, ok = sample_along_flow(g, seeds, pos[seeds], flow_px, cam, jac, ds.time(k),
                                           dens.step, dens.spread, rng)
            parents = seeds[ok]
            new_skin = model.skin.subset(parents)
            # confinement: the new splat must itself land in the allowed region
            new_ctx = DeformContext(self.skel, ds.poses[k], ds.time(k), new_skin)
            p_new = posed_positions(new, new_ctx)
            uv_new, z_new = cam.project(p_new)
            q = np.rint(uv_new).astype(np.int64)
            inside = (z_new > NEAR) & (q[:, 0] >= 0) & (q[:, 0] < ds.width) & (q[:, 1] >= 0) & (q[:, 1] < ds.height)
            conf = np.zeros(len(new), dtype=bool)
            conf[inside] = allowed[q[inside, 1], q[inside, 0]]
            new, parents, new_skin, p_new = new.subset(conf), parents[conf], new_skin.subset(conf), p_new[conf]
            if len(new):
                nctx_n = DeformContext(self.skel, ds.poses[k + 1], ds.time(k + 1), new_skin)
                acc, _ = check_consistency(p_new, posed_positions(new, nctx_n), ds.flows[k], cam, cam_n,
                                           dens.eps_consistency)
                n_added = len(new)
                model.gaussians = g.concat(new)
                model.skin = model.skin.concat(new_skin)
                self.strikes = np.concatenate([self.strikes, np.where(acc, 0, 1)])
                self.born = np.concatenate([self.born, np.ones(n_added, dtype=bool)])
                self.contrib = np.concatenate([self.contrib, self.contrib[parents]])
                remap_state(self.state, np.arange(len(g)), n_added, SPLAT_LR)
                self.stats["added"] += n_added
                self.stats["flagged"] += int((~acc).sum())

        # consistency status for every splat on this frame pair
        g = model.gaussians
        p_k = posed_positions(g, self._ctx(k))
        accept, _ = check_consistency(p_k, posed_positions(g, self._ctx(k + 1)), ds.flows[k], cam, cam_n,
                                      dens.eps_consistency)
        n = len(g)
        recheck = self.born & (self.strikes > 0)
        recheck[n - n_added:] = False
        strikes, drop = update_strikes(self.strikes, accept)
        self.strikes = np.where(recheck, strikes, self.strikes)
        doomed = recheck & drop

        uv_all, z_all = cam.project(p_k)
        w_splat, inside = sample_flow(strength[..., None], uv_all)
        W = np.where(inside & (z_all > NEAR), w_splat[:, 0], 0.0)
        contrib = self.contrib / max(self.contrib_iters, 1)
        budget = int(round(dens.budget_factor * self.init_count))
        keep = prune(max_temporal_opacity(g), contrib, W, accept, floor=dens.opacity_floor,
                     gamma_flow=dens.gamma_flow, budget=budget)
        keep &= ~doomed
        self._apply_keep(keep)
        self.contrib[:] = 0.0
        self.contrib_iters = 0
        log.debug("densify it=%d frame=%d added=%d kept=%d", it, k, n_added, int(keep.sum()))

    # ------------------------------------------------------------ driver

    def run(self, iterations: int | None = None, progress=None) -> TrainResult:
        n_it = self.cfg.iterations if iterations is None else iterations
        rows = []
        for it in range(n_it):
            row = self.step(it)
            if it % self.cfg.log_interval == 0 or it == n_it - 1:
                rows.append(row)
                if progress is not None:
                    progress(row)
        if self.cfg.mode == "no-stg":
            g = self.model.gaussians
            assert not g.motion_coeffs.any() and not g.rot_coeffs[:, 1:].any()
        round_model(self.model)
        return TrainResult(self.model, rows, self.breakdowns, self.state.skipped, **self.stats)


def train(ds: FrameDataset, run: RunConfig | None = None, progress=None) -> TrainResult:
    return Trainer(ds, run or RunConfig.default()).run(progress=progress)


def density_ratio(model: AvatarModel, ds: FrameDataset, dens: DensifyConfig, frames=None) -> float:
    """Mean moving/static splat-density ratio over frames whose flow history is usable."""
    ratios = []
    for k in (ds.train_frames if frames is None else frames):
        lo = max(0, k - dens.window)
        hist = [ds.flows[j] for j in range(lo, k + 1) if ds.flow_usable(j)]
        if not hist:
            continue
        valid = valid_region(hist, len(hist) - 1, dens.delta)
        strength = motion_strength(hist, len(hist) - 1, dens.delta)
        ctx = DeformContext(ds.skeleton, ds.poses[k], ds.time(k), model.skin)
        uv, z = ds.cameras[k].project(posed_positions(model.gaussians, ctx))
        rep = density_report(uv[z > NEAR], np.zeros_like(valid), valid, strength, dens.cell, dens.kappa)
        r = moving_static_density_ratio(rep)
        if np.isfinite(r):
            ratios.append(r)
    return float(np.mean(ratios)) if ratios else float("nan")
