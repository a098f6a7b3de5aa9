#!/usr/bin/env python3
"""Train every mode on the default synthetic scene and print held-out metrics and density ratios."""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from stg_avatar import synth
from stg_avatar.config import MODES, RunConfig
from stg_avatar.model import render_frame
from stg_avatar.trainer import Trainer, density_ratio

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.json")
    ap.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES)
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="optional JSON summary path")
    args = ap.parse_args()

    ds = synth.generate(seed=args.seed, frames=24, height=64, width=64)
    summary = {}
    for mode in args.modes:
        run = RunConfig.load(args.config)
        run.train.mode = mode
        run.train.seed = args.seed
        if args.iters is not None:
            run.train.iterations = args.iters
        t0 = time.process_time()
        res = Trainer(ds, run).run()
        cpu = time.process_time() - t0
        m = res.model
        ev = synth.eval_holdout(
            lambda k: np.clip(render_frame(m, ds.skeleton, ds.poses[k], ds.time(k), ds.cameras[k]).image, 0, 1), ds)
        summary[mode] = {**ev, "density_ratio": density_ratio(m, ds, run.densify), "splats": len(m),
                         "added": res.added, "removed": res.removed, "cpu_s": cpu}
        print(f"{mode:8s} psnr {ev['psnr']:6.2f}  ssim {ev['ssim']:.4f}  ratio {summary[mode]['density_ratio']:.2f}"
              f"  splats {len(m)}  cpu {cpu:.0f} s", flush=True)
    if args.out:
        args.out.write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
