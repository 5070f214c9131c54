"""Analytic quality metrics for synthesized clips.

Everything here is computable in closed form from the frames themselves
because the domain ships its own measurement oracle: mouth aperture is a
dark-pixel fraction, identity lives in the texture outside the mouth box.

* lmd_analog: mean absolute gap between measured and requested aperture.
* outside_mse: squared error vs the source outside the mouth box (identity
  and pose preservation).
* csim_analog: Pearson correlation of the outside-mouth pixels against the
  source, pooled over the clip.
* leakage_score: partial correlation between measured output apertures and
  the source's apertures after regressing both on the target apertures. A
  model that lets source lip motion bleed through scores high even when it
  also tracks the target.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIOError
from .facegen import FaceSpec, measure_aperture, outside_mouth_mask
from .numerics import Grid2D

REPORT_COLUMNS = ("label", "lmd", "outside_mse", "csim", "leakage", "n_frames")
COMPARISON_COLUMNS = ("metric", "rank", "label", "value", "best")

# Ranking directions; leakage ranks by distance from zero (sign is incidental,
# magnitude is the failure). n_frames is reported but never ranked.
METRIC_ORDER = ("lmd", "outside_mse", "csim", "leakage")
_HIGHER_IS_BETTER = {"lmd": False, "outside_mse": False, "csim": True, "leakage": False}


@dataclass(frozen=True)
class EvalReport:
    lmd_analog: float
    outside_mse: float
    csim_analog: float
    leakage_score: float
    n_frames: int

    @property
    def leakage_defined(self) -> bool:
        return not math.isnan(self.leakage_score)

    def as_row(self, label: str) -> dict:
        return {
            "label": label,
            "lmd": self.lmd_analog,
            "outside_mse": self.outside_mse,
            "csim": self.csim_analog,
            "leakage": self.leakage_score,
            "n_frames": self.n_frames,
        }


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return 0.0
    return float(dx @ dy) / denom


def leakage_partial_corr(
    measured: np.ndarray, target: np.ndarray, source: np.ndarray
) -> float:
    """Correlation of measured vs source apertures with the target regressed out.

    Undefined (NaN) below 3 frames: with an intercept and one regressor the
    residuals of a 2-point fit are identically zero.
    """
    measured = np.asarray(measured, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    n = measured.size
    if n < 3:
        return float("nan")
    design = np.column_stack([np.ones(n), target])
    coef_m, *_ = np.linalg.lstsq(design, measured, rcond=None)
    coef_s, *_ = np.linalg.lstsq(design, source, rcond=None)
    resid_m = measured - design @ coef_m
    resid_s = source - design @ coef_s
    # No residual variance on either side means nothing left to leak into.
    if float(resid_m @ resid_m) < 1e-18 or float(resid_s @ resid_s) < 1e-18:
        return 0.0
    return _pearson(resid_m, resid_s)


def eval_clip(
    output: tuple[Grid2D, ...],
    source: tuple[Grid2D, ...],
    spec: FaceSpec,
    target_apertures: np.ndarray,
    source_apertures: np.ndarray,
) -> EvalReport:
    """Score a synthesized clip against its driving targets and its source."""
    n = len(output)
    target_apertures = np.asarray(target_apertures, dtype=np.float64)
    source_apertures = np.asarray(source_apertures, dtype=np.float64)
    if n == 0:
        raise ContractError("cannot evaluate an empty clip")
    if len(source) != n or target_apertures.size != n or source_apertures.size != n:
        raise ContractError(
            f"length mismatch: output {n}, source {len(source)}, "
            f"targets {target_apertures.size}, source apertures {source_apertures.size}"
        )
    outside = outside_mouth_mask(spec).reshape(-1)

    measured = np.array([measure_aperture(f, spec) for f in output])
    lmd = float(np.mean(np.abs(measured - target_apertures)))

    out_pixels = np.concatenate([f.values[outside] for f in output])
    src_pixels = np.concatenate([f.values[outside] for f in source])
    outside_mse = float(np.mean((out_pixels - src_pixels) ** 2))
    csim = _pearson(out_pixels, src_pixels)

    leakage = leakage_partial_corr(measured, target_apertures, source_apertures)
    return EvalReport(
        lmd_analog=lmd,
        outside_mse=outside_mse,
        csim_analog=csim,
        leakage_score=leakage,
        n_frames=n,
    )


# ---------------------------------------------------------------------------
# Report rows and run comparison
# ---------------------------------------------------------------------------


def format_report_row(label: str, report: EvalReport) -> dict:
    return report.as_row(label)


def write_report_rows(rows: list[dict], path: Path | str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow(
                    {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
                )
    except OSError as exc:
        raise DataIOError(f"cannot write report {path}: {exc}") from exc


def read_report_rows(path: Path | str) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != REPORT_COLUMNS:
                raise DataIOError(f"{path}: unexpected report columns {reader.fieldnames}")
            rows = []
            for r in reader:
                rows.append(
                    {
                        "label": r["label"],
                        "lmd": float(r["lmd"]),
                        "outside_mse": float(r["outside_mse"]),
                        "csim": float(r["csim"]),
                        "leakage": float(r["leakage"]),
                        "n_frames": int(r["n_frames"]),
                    }
                )
            return rows
    except OSError as exc:
        raise DataIOError(f"cannot read report {path}: {exc}") from exc


def _rank_key(metric: str, value: float) -> tuple:
    # NaN sorts last in every metric; leakage competes on magnitude.
    bad = math.isnan(value)
    if metric == "leakage":
        score = abs(value)
    elif _HIGHER_IS_BETTER[metric]:
        score = -value
    else:
        score = value
    return (bad, score if not bad else 0.0)


def compare_runs(runs: list[tuple[str, EvalReport]]) -> list[dict]:
    """Long-format ranking: one block per metric, best first.

    Ties are broken by label so the table does not depend on input order.
    """
    if not runs:
        raise ContractError("nothing to compare")
    labels = [label for label, _ in runs]
    if len(set(labels)) != len(labels):
        raise ContractError(f"duplicate run labels: {labels}")
    rows = []
    for metric in METRIC_ORDER:
        scored = [(label, report.as_row(label)[metric]) for label, report in runs]
        scored.sort(key=lambda lv: (_rank_key(metric, lv[1]), lv[0]))
        for rank, (label, value) in enumerate(scored, start=1):
            rows.append(
                {
                    "metric": metric,
                    "rank": rank,
                    "label": label,
                    "value": value,
                    "best": 1 if rank == 1 else 0,
                }
            )
    return rows


def write_comparison_csv(rows: list[dict], path: Path | str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow(
                    {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
                )
    except OSError as exc:
        raise DataIOError(f"cannot write comparison {path}: {exc}") from exc
