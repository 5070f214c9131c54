"""Euler sampler with progressive initialization.

Synthesis does not start from pure noise. The source frame already carries
identity, pose, and lighting, so the initial state is the source pushed
partway up the noise path (tau_start, default 0.92) and integration only
has to walk back down from there. Guidance combines the conditional and
unconditional velocity branches at every step.

Per-frame noise comes from a counter-based stream keyed by absolute frame
index, which makes chunked synthesis bitwise identical to a single pass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIOError, NumericError, ShapeError
from .facegen import AudioTrack, FaceSpec, mouth_bbox
from .flowcore import fm_add, make_time_grid
from .guidance import GuidanceConfig, apply_dscfg
from .numerics import Grid2D, RngStream
from .velocity_models import ConditionBundle

TRACE_COLUMNS = ("step", "tau", "mean", "std", "mouth_mse", "outside_mse")


@dataclass(frozen=True)
class SamplerConfig:
    tau_start: float = 0.92
    n_steps: int = 50
    seed: int = 0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig.off)

    def __post_init__(self):
        if not 0.0 < self.tau_start <= 1.0:
            raise ContractError(f"tau_start must lie in (0, 1], got {self.tau_start}")
        if self.n_steps < 1:
            raise ContractError(f"n_steps must be >= 1, got {self.n_steps}")


@dataclass(frozen=True)
class SampleTrace:
    """Integration record for one frame.

    ``snapshots`` holds the unclamped state at every grid node (initial state
    first, final state last) when snapshot recording was requested, else only
    the endpoints. ``final`` is always the unclamped end state; the exported
    frame is its clamped counterpart.
    """

    taus: tuple[float, ...]
    snapshots: tuple[Grid2D, ...]
    final: Grid2D

    @property
    def n_steps(self) -> int:
        return len(self.taus) - 1


def progressive_init(source: Grid2D, tau_start: float, rng: RngStream) -> Grid2D:
    """Source frame advected to tau_start along the straight noise path."""
    noised, _ = fm_add(source, tau_start, rng)
    return noised


def sample_frame(
    model,
    source: Grid2D,
    audio: np.ndarray | None,
    cfg: SamplerConfig,
    rng: RngStream,
    keep_snapshots: bool = False,
) -> tuple[Grid2D, SampleTrace]:
    """Integrate one frame from tau_start down to 0.

    Internal state stays unclamped; only the returned frame is clipped to
    [0, 1] for export. Non-finite state aborts with the offending step index.
    """
    grid = make_time_grid(cfg.tau_start, cfg.n_steps)
    x = progressive_init(source, cfg.tau_start, rng)
    snapshots = [x]
    for i in range(grid.n_steps):
        t0, t1 = grid.taus[i], grid.taus[i + 1]
        # Both branches are always computed in one fixed-shape call; the
        # guidance mode only decides how they are combined. Disabled guidance
        # therefore yields the exact bits of the unconditional branch.
        v_cond, v_uncond = model.velocity_pair(
            x,
            ConditionBundle((source,), audio, t0),
            ConditionBundle((source,), None, t0),
        )
        v_hat = apply_dscfg(v_cond, v_uncond, cfg.guidance, t0)
        values = x.values - (t0 - t1) * v_hat.values
        if not np.all(np.isfinite(values)):
            raise NumericError(
                f"sampler state became non-finite at step {i} (tau {t0:.6g} -> {t1:.6g})"
            )
        x = x.with_values(values)
        if keep_snapshots:
            snapshots.append(x)
    if not keep_snapshots:
        snapshots.append(x)
    frame = x.with_values(np.clip(x.values, 0.0, 1.0))
    return frame, SampleTrace(taus=grid.taus, snapshots=tuple(snapshots), final=x)


def sample_clip(
    model,
    source_frames: tuple[Grid2D, ...],
    audio: AudioTrack | None,
    cfg: SamplerConfig,
    start_frame: int = 0,
    keep_snapshots: bool = False,
) -> tuple[tuple[Grid2D, ...], tuple[SampleTrace, ...]]:
    """Synthesize one frame per source frame.

    ``start_frame`` is the absolute index of the first frame within the full
    clip; noise streams are keyed by absolute index, so synthesizing a clip
    in chunks reproduces the single-shot output exactly.
    """
    if not source_frames:
        raise ContractError("no source frames to synthesize from")
    if start_frame < 0:
        raise ContractError(f"start_frame must be >= 0, got {start_frame}")
    if audio is not None and audio.n_frames != len(source_frames):
        raise ShapeError(
            f"audio has {audio.n_frames} frames, source clip has {len(source_frames)}"
        )
    frames = []
    traces = []
    for i, source in enumerate(source_frames):
        rng = RngStream(cfg.seed, start_frame + i)
        audio_vec = None if audio is None else audio.features[i]
        frame, trace = sample_frame(model, source, audio_vec, cfg, rng, keep_snapshots)
        frames.append(frame)
        traces.append(trace)
    return tuple(frames), tuple(traces)


def trace_rows(trace: SampleTrace, source: Grid2D, spec: FaceSpec) -> list[dict]:
    """Per-node diagnostics: state stats plus MSE vs the source, split at the
    mouth bounding box. Requires a trace recorded with snapshots."""
    if len(trace.snapshots) != len(trace.taus):
        raise ContractError("trace has no per-step snapshots; rerun with snapshots enabled")
    y0, y1, x0, x1 = mouth_bbox(spec)
    mouth = np.zeros((source.height, source.width), dtype=bool)
    mouth[y0 : y1 + 1, x0 : x1 + 1] = True
    mouth = mouth.reshape(-1)
    src = source.values
    rows = []
    for step, (tau, snap) in enumerate(zip(trace.taus, trace.snapshots)):
        err = (snap.values - src) ** 2
        rows.append(
            {
                "step": step,
                "tau": tau,
                "mean": float(np.mean(snap.values)),
                "std": float(np.std(snap.values)),
                "mouth_mse": float(np.mean(err[mouth])),
                "outside_mse": float(np.mean(err[~mouth])),
            }
        )
    return rows


def write_trace_csv(trace: SampleTrace, source: Grid2D, spec: FaceSpec, path: Path | str) -> None:
    rows = trace_rows(trace, source, spec)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    except OSError as exc:
        raise DataIOError(f"cannot write trace {path}: {exc}") from exc
