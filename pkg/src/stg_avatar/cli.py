"""Command-line entry point: synth, train, render, animate, eval."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, synth
from .camera import Camera
from .config import MODES, RunConfig
from .data import DataError, load_dataset, write_png
from .deform import NOVEL_POSE_TIME
from .model import AvatarModel, render_frame
from .skeleton import Skeleton, load_poses
from .trainer import NumericError, Trainer, write_metrics

EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
CKPT_NAME = "model.stga"
METRICS_NAME = "metrics.csv"

log = logging.getLogger("stg_avatar")


class ArgError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        if "x" in text.lower():
            h, w = text.lower().split("x")
            return int(h), int(w)
        return int(text), int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None


def _frames(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated frame indices, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stg-avatar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic capsule-figure dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=24)
    s.add_argument("--size", type=_size, default=(64, 64), help="N or HxW")
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="fit an avatar to a dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--config", type=Path)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=MODES)

    r = sub.add_parser("render", help="render one frame of a dataset")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--frame", type=int, required=True, help="pose/time source frame")
    r.add_argument("--view", type=int, help="camera source frame (default: --frame)")
    r.add_argument("--out", type=Path, required=True)

    a = sub.add_parser("animate", help="render a pose sequence from the reference camera")
    a.add_argument("--ckpt", type=Path, required=True)
    a.add_argument("--poses", type=Path, required=True)
    a.add_argument("--out-dir", type=Path, required=True)

    e = sub.add_parser("eval", help="PSNR/SSIM on held-out frames, printed as JSON")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--holdout", type=_frames, help="comma-separated frames (default: dataset holdout)")
    return p


def _load_run(args) -> RunConfig:
    try:
        run = RunConfig.load(args.config) if args.config else RunConfig.default()
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as e:
        raise ArgError(f"bad config: {e}") from e
    d = run.to_dict()
    if args.iters is not None:
        d["train"]["iterations"] = args.iters
    if args.seed is not None:
        d["train"]["seed"] = args.seed
    if args.mode is not None:
        d["train"]["mode"] = args.mode
    try:
        return RunConfig.from_dict(d)
    except ValueError as e:
        raise ArgError(str(e)) from e


def cmd_synth(args) -> int:
    h, w = args.size
    if args.frames < 2:
        raise ArgError("--frames must be >= 2")
    try:
        synth.generate(args.seed, args.frames, h, w, args.out)
    except ValueError as e:
        raise ArgError(str(e)) from e
    log.info("wrote %d frames (%dx%d) to %s", args.frames, h, w, args.out)
    return 0


def cmd_train(args) -> int:
    run = _load_run(args)
    ds = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(ds, run)

    def progress(row):
        log.info("it %5d  rgb %.4f  total %.4f  splats %d  psnr %.2f", row["iteration"], row["rgb"],
                 row["total"], row["splat_count"], row["psnr_train"])

    res = trainer.run(progress=progress)
    write_metrics(args.out / METRICS_NAME, res.rows)
    sidecar = {
        "config": run.to_dict(),
        "provenance": {"seed": run.train.seed, "dataset_hash": ds.content_hash(), "mode": run.train.mode,
                       "iterations": run.train.iterations},
        "skeleton": ds.skeleton.to_dict(),
        "camera": ds.cameras[ds.train_frames[0]].to_dict(),
        "background": list(run.train.background),
        "stats": {"added": res.added, "removed": res.removed, "flagged": res.flagged,
                  "skipped_tensors": res.skipped_tensors, "splats": len(res.model)},
    }
    checkpoint.save(args.out / CKPT_NAME, res.model, sidecar)
    log.info("saved %s (%d splats)", args.out / CKPT_NAME, len(res.model))
    return 0


def _render(model: AvatarModel, skel: Skeleton, pose, t: float, cam: Camera, bg) -> np.ndarray:
    return np.clip(render_frame(model, skel, pose, t, cam, bg).image, 0.0, 1.0)


def cmd_render(args) -> int:
    model, meta = checkpoint.load(args.ckpt)
    ds = load_dataset(args.data)
    view = args.frame if args.view is None else args.view
    for k in (args.frame, view):
        if not 0 <= k < len(ds):
            raise DataError(f"frame {k} outside 0..{len(ds) - 1}")
    img = _render(model, ds.skeleton, ds.poses[args.frame], ds.time(args.frame), ds.cameras[view],
                  meta.get("background", (0.0, 0.0, 0.0)))
    write_png(args.out, img)
    return 0


def cmd_animate(args) -> int:
    model, meta = checkpoint.load(args.ckpt)
    if "skeleton" not in meta or "camera" not in meta:
        raise DataError("checkpoint sidecar lacks skeleton/camera")
    skel = Skeleton.from_dict(meta["skeleton"])
    cam = Camera.from_dict(meta["camera"])
    try:
        poses = load_poses(args.poses)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read poses {args.poses}: {e}") from e
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        if len(pose.rotations) != len(skel):
            raise DataError(f"pose {i} has {len(pose.rotations)} bones, skeleton has {len(skel)}")
        img = _render(model, skel, pose, NOVEL_POSE_TIME, cam, meta.get("background", (0.0, 0.0, 0.0)))
        write_png(args.out_dir / f"{i:04d}.png", img)
    log.info("rendered %d poses to %s", len(poses), args.out_dir)
    return 0


def cmd_eval(args) -> int:
    model, meta = checkpoint.load(args.ckpt)
    ds = load_dataset(args.data)
    bg = meta.get("background", (0.0, 0.0, 0.0))
    frames = ds.holdout if args.holdout is None else args.holdout
    res = synth.eval_holdout(lambda k: render_frame(model, ds.skeleton, ds.poses[k], ds.time(k),
                                                    ds.cameras[k], bg).image, ds, frames)
    print(json.dumps(res))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "animate": cmd_animate,
            "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except ArgError as e:
        log.error("%s", e)
        return EXIT_ARGS
    except (DataError, checkpoint.CheckpointError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except NumericError as e:
        log.error("%s", e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
