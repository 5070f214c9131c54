"""Ablation arms and the bootstrap comparison between them.

Five arms share one held-out evaluation set:

* full:         two-pool training, progressive init, spatially ramped guidance
* no_prog_init: full checkpoint, but synthesis starts from pure noise
* no_tds:       checkpoint trained with the pool coin-flipped independently
                of the noise level, same synthesis as full
* low_static:   full checkpoint, flat guidance at a small scale
* high_static:  full checkpoint, flat guidance at a large scale

Only two training configurations exist among the five, so only two models
are trained; arms sharing a configuration get byte-identical copies of the
checkpoint (training is deterministic, retraining would produce the same
file). Orderings between arms are scored by paired bootstrap over clips.
"""

from __future__ import annotations

import csv
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datasets import ProceduralPools, make_eval_pairs, source_apertures_of
from .errors import ConfigError, DataIOError
from .evalmetrics import (
    EvalReport,
    compare_runs,
    eval_clip,
    write_comparison_csv,
    write_report_rows,
)
from .numerics import RngStream
from .runconfig import RunConfig
from .sampler import SamplerConfig, sample_clip
from .training import train
from .velocity_models import load_checkpoint

ARM_NAMES = ("full", "no_prog_init", "no_tds", "low_static", "high_static")

BOOTSTRAP_STREAM = 2**41

ORDERINGS_COLUMNS = ("ordering", "better", "worse", "metric", "better_mean", "worse_mean", "holds", "confidence")


@dataclass(frozen=True)
class Ordering:
    name: str
    better: str
    worse: str
    metric: str
    higher_is_better: bool


# The directional claims the study is expected to reproduce.
ORDERINGS = (
    Ordering("prog_init_outside", "full", "no_prog_init", "outside_mse", False),
    Ordering("tds_csim", "full", "no_tds", "csim", True),
    Ordering("low_static_lmd", "full", "low_static", "lmd", False),
    Ordering("high_static_outside", "full", "high_static", "outside_mse", False),
)


def arm_sampler_cfg(arm: str, cfg: RunConfig) -> SamplerConfig:
    if arm not in ARM_NAMES:
        raise ConfigError(f"unknown ablation arm {arm!r}, expected one of {ARM_NAMES}")
    base = cfg.sampler_cfg(cfg.guidance_cfg(mode="dscfg"))
    if arm == "no_prog_init":
        return replace(base, tau_start=1.0)
    if arm == "low_static":
        return replace(base, guidance=cfg.guidance_cfg(mode="static", static_scale=cfg["ablate.low_static"]))
    if arm == "high_static":
        return replace(base, guidance=cfg.guidance_cfg(mode="static", static_scale=cfg["ablate.high_static"]))
    return base


def arm_checkpoint_kind(arm: str) -> str:
    """Training configuration an arm runs on: only no_tds trains differently."""
    return "single_pool" if arm == "no_tds" else "full"


def train_arm_checkpoints(cfg: RunConfig, out_dir: Path, force: bool = False) -> dict[str, Path]:
    """Ensure both training configurations have a checkpoint on disk.

    Existing checkpoints are reused unless force is set; a missing one is
    trained from scratch. Returns kind -> path.
    """
    ckpt_dir = Path(out_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    pools = ProceduralPools(cfg.facegen_cfg())
    paths = {}
    for kind in ("full", "single_pool"):
        path = ckpt_dir / f"{kind}.ckpt"
        paths[kind] = path
        if path.exists() and path.stat().st_size > 0 and not force:
            continue
        # Arm training length is its own knob so the study budget can be
        # tuned without touching the method's training config.
        train_cfg = replace(cfg.train_cfg(), n_steps=cfg["ablate.train_steps"])
        if kind == "single_pool":
            train_cfg = replace(train_cfg, single_pool=True)
        train(train_cfg, pools, path, log_path=ckpt_dir / f"{kind}_loss.csv")
    return paths


def _evaluate_arm(args) -> tuple[str, list[EvalReport]]:
    """One arm over the whole eval set; module-level so arms can run in
    separate processes."""
    arm, ckpt_path, cfg, pairs = args
    model = load_checkpoint(ckpt_path)
    sampler_cfg = arm_sampler_cfg(arm, cfg)
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
    return arm, reports


def mean_report(reports: list[EvalReport]) -> EvalReport:
    return EvalReport(
        lmd_analog=float(np.mean([r.lmd_analog for r in reports])),
        outside_mse=float(np.mean([r.outside_mse for r in reports])),
        csim_analog=float(np.mean([r.csim_analog for r in reports])),
        leakage_score=float(np.nanmean([r.leakage_score for r in reports])),
        n_frames=int(sum(r.n_frames for r in reports)),
    )


def bootstrap_confidence(
    better_vals: np.ndarray,
    worse_vals: np.ndarray,
    higher_is_better: bool,
    n_resamples: int,
    seed: int,
) -> float:
    """Fraction of paired clip resamples where the mean ordering holds."""
    better_vals = np.asarray(better_vals, dtype=np.float64)
    worse_vals = np.asarray(worse_vals, dtype=np.float64)
    n = better_vals.size
    rng = RngStream(seed, BOOTSTRAP_STREAM)
    idx = rng.integers(0, n, n_resamples * n).reshape(n_resamples, n)
    b_means = better_vals[idx].mean(axis=1)
    w_means = worse_vals[idx].mean(axis=1)
    if higher_is_better:
        wins = b_means > w_means
    else:
        wins = b_means < w_means
    return float(np.mean(wins))


def run_ablation(
    cfg: RunConfig,
    out_dir: Path | str,
    parallel_arms: bool = False,
    max_workers: int | None = None,
    force_retrain: bool = False,
) -> dict:
    """Train (or reuse) the arm checkpoints, evaluate all arms, and write
    the per-clip rows, arm means, ranking table, and ordering confidences."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind_paths = train_arm_checkpoints(cfg, out_dir, force=force_retrain)

    # Dedicated checkpoint file per arm; shared kinds are byte copies.
    arm_ckpts = {}
    for arm in ARM_NAMES:
        arm_dir = out_dir / "arms" / arm
        arm_dir.mkdir(parents=True, exist_ok=True)
        dst = arm_dir / "model.ckpt"
        src = kind_paths[arm_checkpoint_kind(arm)]
        if dst.resolve() != src.resolve():
            shutil.copyfile(src, dst)
        arm_ckpts[arm] = dst

    pairs = make_eval_pairs(
        cfg["ablate.eval_clips"], cfg["ablate.clip_len"], cfg["ablate.eval_seed"], cfg.facegen_cfg()
    )
    jobs = [(arm, arm_ckpts[arm], cfg, pairs) for arm in ARM_NAMES]
    if parallel_arms:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            results = dict(pool.map(_evaluate_arm, jobs))
    else:
        results = dict(map(_evaluate_arm, jobs))

    clip_rows = []
    means = {}
    for arm in ARM_NAMES:
        reports = results[arm]
        means[arm] = mean_report(reports)
        for i, rep in enumerate(reports):
            clip_rows.append(rep.as_row(f"{arm}/clip{i:02d}"))
    write_report_rows(clip_rows, out_dir / "arm_clips.csv")
    write_report_rows([means[arm].as_row(arm) for arm in ARM_NAMES], out_dir / "arm_means.csv")
    write_comparison_csv(
        compare_runs([(arm, means[arm]) for arm in ARM_NAMES]), out_dir / "comparison.csv"
    )

    ordering_rows = []
    for o in ORDERINGS:
        b_vals = np.array([r.as_row("x")[o.metric] for r in results[o.better]])
        w_vals = np.array([r.as_row("x")[o.metric] for r in results[o.worse]])
        conf = bootstrap_confidence(
            b_vals, w_vals, o.higher_is_better, cfg["ablate.bootstrap"], cfg["ablate.eval_seed"]
        )
        b_mean, w_mean = float(b_vals.mean()), float(w_vals.mean())
        holds = b_mean > w_mean if o.higher_is_better else b_mean < w_mean
        ordering_rows.append(
            {
                "ordering": o.name,
                "better": o.better,
                "worse": o.worse,
                "metric": o.metric,
                "better_mean": b_mean,
                "worse_mean": w_mean,
                "holds": int(holds),
                "confidence": conf,
            }
        )
    try:
        with open(out_dir / "orderings.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=ORDERINGS_COLUMNS)
            writer.writeheader()
            for row in ordering_rows:
                writer.writerow(
                    {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
                )
    except OSError as exc:
        raise DataIOError(f"cannot write orderings: {exc}") from exc

    return {"means": means, "orderings": ordering_rows, "per_clip": results}
