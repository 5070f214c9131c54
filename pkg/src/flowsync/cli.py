"""Command-line entry points.

Subcommands: gen-data, train, sample, ablate, eval, report. Every command
resolves its configuration the same way (defaults, then --config file, then
command-line overrides), writes the resolved settings next to its outputs,
and maps error categories onto distinct exit codes so scripted callers can
branch on the failure kind.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import ablate as ablate_mod
from .datasets import (
    DatasetPools,
    ProceduralPools,
    read_spec_meta,
    write_dataset,
)
from .errors import (
    EXIT_IO,
    EXIT_OK,
    EXIT_UNEXPECTED,
    ConfigError,
    ContractError,
    FlowsyncError,
    exit_code_for,
)
from .evalmetrics import (
    EvalReport,
    compare_runs,
    eval_clip,
    read_report_rows,
    write_comparison_csv,
    write_report_rows,
)
from .facegen import AudioTrack, measure_aperture, read_clip, read_sidecar, write_clip
from .runconfig import RunConfig, load_config, write_resolved_config
from .sampler import sample_clip, write_trace_csv
from .training import smoothed_loss_ratio, train
from .velocity_models import load_checkpoint

# Which config seeds the global --seed flag retargets, per command.
_SEED_KEYS = {
    "gen-data": ("data.seed",),
    "train": ("train.seed",),
    "sample": ("sample.seed",),
    "ablate": ("train.seed", "ablate.eval_seed"),
}


def _worker_cap() -> int | None:
    raw = os.environ.get("FLOWSYNC_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"FLOWSYNC_THREADS must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError(f"FLOWSYNC_THREADS must be >= 1, got {cap}")
    return cap


def _add_global_flags(parser: argparse.ArgumentParser, top: bool) -> None:
    """Global flags are accepted both before and after the subcommand. The
    subparser copies default to SUPPRESS so an absent flag never clobbers a
    value the main parser already set."""

    def d(value):
        return value if top else argparse.SUPPRESS

    parser.add_argument("--config", type=Path, default=d(None), help="run configuration file")
    parser.add_argument("--seed", type=int, default=d(None), help="override the command's seed(s)")
    parser.add_argument("--out", type=Path, default=d(None), help="output directory")
    parser.add_argument(
        "--force", action="store_true", default=d(False), help="overwrite existing outputs"
    )
    # Separate dest for the subcommand copy: the subparser parses into a
    # fresh namespace, so sharing a dest would drop values given before the
    # subcommand. _resolve_config concatenates both lists.
    parser.add_argument(
        "--set",
        action="append",
        dest="set" if top else "set_after",
        default=d([]),
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowsync",
        description="Flow-matching lip-sync toy pipeline on a procedural face domain.",
    )
    _add_global_flags(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _add_global_flags(p, top=False)
        return p

    add_command("gen-data", "generate a clip-pair dataset")

    p_train = add_command("train", "train a velocity model")
    p_train.add_argument("--data", type=Path, help="dataset dir (default: procedural pools)")
    p_train.add_argument("--steps", type=int, help="override train.steps")
    p_train.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p_train.add_argument("--start-step", type=int, default=0, help="step index to resume at")

    p_sample = add_command("sample", "synthesize a clip from source frames + audio")
    p_sample.add_argument("--ckpt", type=Path, required=True)
    p_sample.add_argument("--source", type=Path, required=True, help="source clip dir")
    p_sample.add_argument("--audio", type=Path, required=True, help="driving audio CSV")
    p_sample.add_argument("--guidance", choices=("dscfg", "static", "off"), help="override guidance.mode")
    p_sample.add_argument("--omega-peak", type=float, help="override guidance.omega_peak")
    p_sample.add_argument("--tau-start", type=float, help="override sample.tau_start")
    p_sample.add_argument("--steps", type=int, help="override sample.steps")
    p_sample.add_argument("--trace", action="store_true", help="write per-frame trace CSVs")
    p_sample.add_argument("--start-frame", type=int, default=0, help="absolute index of first frame")

    p_ablate = add_command("ablate", "run the five-arm ablation study")
    p_ablate.add_argument("--parallel-arms", action="store_true", help="evaluate arms in parallel")

    p_eval = add_command("eval", "score a synthesized clip")
    p_eval.add_argument("--output", type=Path, required=True, help="synthesized clip dir")
    p_eval.add_argument("--source", type=Path, required=True, help="source clip dir")
    p_eval.add_argument("--audio", type=Path, required=True, help="target audio CSV with apertures")
    p_eval.add_argument("--label", default="run", help="row label")

    p_report = add_command("report", "merge report rows into a ranking table")
    p_report.add_argument("--rows", type=Path, action="append", default=[], help="report row CSV (repeatable)")
    p_report.add_argument("--plots", action="store_true", help="also render line charts")
    p_report.add_argument("--loss-log", type=Path, action="append", default=[], help="loss log CSV to plot")

    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig() if args.config is None else load_config(args.config)
    overrides: dict[str, str] = {}
    for item in [*args.set, *getattr(args, "set_after", [])]:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        for key in _SEED_KEYS.get(args.command, ()):
            overrides[key] = str(args.seed)
    if args.command == "train" and args.steps is not None:
        overrides["train.steps"] = str(args.steps)
    if args.command == "sample":
        if args.guidance is not None:
            overrides["guidance.mode"] = args.guidance
        if args.omega_peak is not None:
            overrides["guidance.omega_peak"] = str(args.omega_peak)
        if args.tau_start is not None:
            overrides["sample.tau_start"] = str(args.tau_start)
        if args.steps is not None:
            overrides["sample.steps"] = str(args.steps)
    return cfg.with_overrides(overrides)


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out")
    return args.out


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    rows = write_dataset(
        out,
        n_pseudo=cfg["data.n_pseudo"],
        n_arbitrary=cfg["data.n_arbitrary"],
        clip_len=cfg["data.clip_len"],
        seed=cfg["data.seed"],
        cfg=cfg.facegen_cfg(),
        force=args.force,
    )
    write_resolved_config(cfg, out)
    print(f"wrote {len(rows)} pairs to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    pools = ProceduralPools(cfg.facegen_cfg()) if args.data is None else DatasetPools(args.data)
    ckpt = out / "model.ckpt"
    state = train(
        cfg.train_cfg(),
        pools,
        ckpt,
        log_path=out / "loss_log.csv",
        resume_from=args.resume,
        start_step=args.start_step,
    )
    write_resolved_config(cfg, out)
    losses = [r["loss"] for r in state.log_rows]
    if len(losses) >= 100:
        initial, final, ratio = smoothed_loss_ratio(losses)
        print(f"trained {len(losses)} steps: smoothed loss {initial:.4f} -> {final:.4f} (x{ratio:.3f})")
    elif losses:
        print(f"trained {len(losses)} steps: last loss {losses[-1]:.4f}")
    else:
        print("trained 0 steps: wrote initial checkpoint")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    if not args.audio.exists():
        raise ContractError(f"audio CSV not found: {args.audio}")
    model = load_checkpoint(args.ckpt)
    source_frames, _, _ = read_clip(args.source)
    spec, fps = read_spec_meta(Path(args.source) / "meta.csv")
    target_apertures, audio_feats = read_sidecar(args.audio)
    if audio_feats is None:
        raise ContractError(f"{args.audio} has no audio_* columns")
    if len(source_frames) != audio_feats.shape[0]:
        raise ContractError(
            f"source clip has {len(source_frames)} frames, audio CSV {audio_feats.shape[0]} rows"
        )
    audio = AudioTrack(features=audio_feats, fps=fps)
    sampler_cfg = cfg.sampler_cfg()
    frames, traces = sample_clip(
        model,
        source_frames,
        audio,
        sampler_cfg,
        start_frame=args.start_frame,
        keep_snapshots=args.trace,
    )
    out.mkdir(parents=True, exist_ok=True)
    measured = np.array([measure_aperture(f, spec) for f in frames])
    write_clip(out, frames, measured)
    if args.trace:
        for i, tr in enumerate(traces):
            write_trace_csv(tr, source_frames[i], spec, out / f"trace_{args.start_frame + i:03d}.csv")
    report_note = ""
    if target_apertures.size == len(frames):
        source_ap = np.array([measure_aperture(f, spec) for f in source_frames])
        report = eval_clip(frames, source_frames, spec, target_apertures, source_ap)
        write_report_rows([report.as_row("sample")], out / "report_row.csv")
        report_note = (
            f"; lmd {report.lmd_analog:.4f} outside_mse {report.outside_mse:.5f} "
            f"csim {report.csim_analog:.4f}"
        )
    write_resolved_config(cfg, out)
    print(f"wrote {len(frames)} frames to {out}{report_note}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    results = ablate_mod.run_ablation(
        cfg,
        out,
        parallel_arms=args.parallel_arms,
        max_workers=_worker_cap(),
        force_retrain=args.force,
    )
    write_resolved_config(cfg, out)
    for row in results["orderings"]:
        verdict = "holds" if row["holds"] else "FAILS"
        print(
            f"{row['ordering']}: {row['better']} vs {row['worse']} on {row['metric']} "
            f"{verdict} (confidence {row['confidence']:.3f})"
        )
    print(f"report files in {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    output_frames, _, _ = read_clip(args.output)
    source_frames, _, _ = read_clip(args.source)
    spec, _ = read_spec_meta(Path(args.source) / "meta.csv")
    if not args.audio.exists():
        raise ContractError(f"audio CSV not found: {args.audio}")
    target_apertures, _ = read_sidecar(args.audio)
    source_ap = np.array([measure_aperture(f, spec) for f in source_frames])
    report = eval_clip(output_frames, source_frames, spec, target_apertures, source_ap)
    row = report.as_row(args.label)
    print(",".join(str(row[k]) for k in ("label", "lmd", "outside_mse", "csim", "leakage", "n_frames")))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_report_rows([row], args.out / f"report_{args.label}.csv")
        print(f"wrote {args.out / f'report_{args.label}.csv'}")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.rows:
        merged = []
        for path in args.rows:
            merged.extend(read_report_rows(path))
        runs = [
            (
                row["label"],
                EvalReport(
                    lmd_analog=row["lmd"],
                    outside_mse=row["outside_mse"],
                    csim_analog=row["csim"],
                    leakage_score=row["leakage"],
                    n_frames=row["n_frames"],
                ),
            )
            for row in merged
        ]
        write_comparison_csv(compare_runs(runs), out / "comparison.csv")
        wrote.append("comparison.csv")
    if args.plots:
        wrote.extend(_render_plots(args, out))
    if not wrote:
        raise ConfigError("report needs --rows and/or --plots with --loss-log")
    print(f"wrote {', '.join(wrote)} in {out}")
    return EXIT_OK


def _render_plots(args, out: Path) -> list[str]:
    try:
        import matplotlib
    except ImportError as exc:
        raise ConfigError(
            "--plots needs matplotlib; install the 'plots' extra"
        ) from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .training import read_loss_log

    wrote = []
    if args.loss_log:
        fig, ax = plt.subplots(figsize=(7, 4))
        for path in args.loss_log:
            rows = read_loss_log(path)
            ax.plot([r["step"] for r in rows], [r["loss"] for r in rows], label=Path(path).stem)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", dpi=120)
        plt.close(fig)
        wrote.append("loss_curves.png")
    return wrote


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = _resolve_config(args)
        return _COMMANDS[args.command](args, cfg)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 1)
    except FlowsyncError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # pragma: no cover - safety net
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
