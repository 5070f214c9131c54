#!/usr/bin/env python3
"""Sweep the guidance peak strength on a trained checkpoint.

For each omega_peak value the same evaluation clips are synthesized and
scored, so the rows trace the lip-accuracy vs identity-preservation tradeoff
the guidance schedule is supposed to navigate. Output is one CSV row per
sweep point plus a console table.

    python scripts/guidance_sweep.py --ckpt runs/ablation/checkpoints/full.ckpt \
        --out runs/sweep --peaks 0,1,2,3,5,8
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np

from flowsync.ablate import mean_report
from flowsync.datasets import make_eval_pairs, source_apertures_of
from flowsync.evalmetrics import eval_clip
from flowsync.runconfig import RunConfig
from flowsync.sampler import sample_clip
from flowsync.velocity_models import load_checkpoint

COLUMNS = ("omega_peak", "lmd", "outside_mse", "csim", "leakage")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ckpt", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--peaks", default="0,1,2,3,5,8", help="comma-separated omega_peak values")
    parser.add_argument("--clips", type=int, default=10)
    parser.add_argument("--clip-len", type=int, default=16)
    parser.add_argument("--seed", type=int, default=777)
    args = parser.parse_args()

    cfg = RunConfig()
    model = load_checkpoint(args.ckpt)
    pairs = make_eval_pairs(args.clips, args.clip_len, args.seed, cfg.facegen_cfg())

    rows = []
    for peak in (float(v) for v in args.peaks.split(",")):
        sampler_cfg = cfg.with_overrides({"guidance.omega_peak": repr(peak)}).sampler_cfg()
        reports = []
        for pair in pairs:
            frames, _ = sample_clip(model, pair.cond_clip, pair.target_audio, sampler_cfg)
            reports.append(
                eval_clip(
                    frames,
                    pair.cond_clip,
                    pair.cond_spec,
                    np.array(pair.ground_truth_apertures),
                    source_apertures_of(pair),
                )
            )
        m = mean_report(reports)
        rows.append(
            {
                "omega_peak": peak,
                "lmd": m.lmd_analog,
                "outside_mse": m.outside_mse,
                "csim": m.csim_analog,
                "leakage": m.leakage_score,
            }
        )
        print(
            f"omega_peak {peak:5.2f}  lmd {m.lmd_analog:.4f}  "
            f"outside_mse {m.outside_mse:.5f}  csim {m.csim_analog:.4f}"
        )

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "guidance_sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    print(f"wrote {args.out / 'guidance_sweep.csv'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
