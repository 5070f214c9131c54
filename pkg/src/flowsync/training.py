"""Conditional flow-matching training loop.

Each step draws a fresh batch of clip pairs from the procedural domain (or a
stored dataset), picks per item a noise level tau ~ U(0,1), and regresses the
model output onto the conditional velocity eps - clean at the interpolated
state. Pool choice is tied to tau: above the threshold the pair comes from
the pseudo-paired pool (same identity and pose, different mouth), below it
from the arbitrary pool. High noise levels are exactly where lip content is
destroyed, so that is where pseudo-paired supervision is spent.

Every step seeds its own counter-based stream from (seed, step index), so a
resumed run consumes the same randomness as an uninterrupted one.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataIOError, NumericError
from .facegen import POOL_ARBITRARY, POOL_PSEUDO, ClipPair
from .flowcore import fm_add, validate_tau, velocity_target
from .numerics import RngStream, mlp_backward, mlp_forward
from .velocity_models import (
    TAU_EMBED_DIM,
    LearnedVelocityModel,
    init_velocity_model,
    load_checkpoint,
    save_checkpoint,
)

# Stream id for parameter init; step streams use the step index itself,
# which stays far below this.
INIT_STREAM = 2**32

LOSS_LOG_COLUMNS = ("step", "tau_mean", "pool_frac_pseudo", "loss")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    tau_threshold: float = 0.85
    learning_rate: float = 1e-3
    batch_size: int = 32
    n_steps: int = 2000
    audio_dropout_p: float = 0.1
    seed: int = 0
    clip_len: int = 8
    ckpt_every: int = 500
    single_pool: bool = False
    hidden: tuple[int, ...] = (1536,)
    frame_h: int = 32
    frame_w: int = 32
    audio_dim: int = 1

    def __post_init__(self):
        if not 0.0 <= self.tau_threshold <= 1.0:
            raise ConfigError(f"tau_threshold must lie in [0, 1], got {self.tau_threshold}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_steps < 0:
            raise ConfigError(f"n_steps must be >= 0, got {self.n_steps}")
        if not 0.0 <= self.audio_dropout_p <= 1.0:
            raise ConfigError(f"audio_dropout_p must lie in [0, 1], got {self.audio_dropout_p}")
        if self.clip_len < 1:
            raise ConfigError(f"clip_len must be >= 1, got {self.clip_len}")


def pick_pool(tau: float, cfg: TrainConfig) -> str:
    """Pool for one training item: pseudo-paired strictly above the threshold."""
    tau = validate_tau(tau)
    return POOL_PSEUDO if tau > cfg.tau_threshold else POOL_ARBITRARY


@dataclass(frozen=True)
class TrainItem:
    """One batch element; tau is drawn at assembly time because the pool
    choice depends on it."""

    pair: ClipPair
    tau: float
    frame_idx: int
    drop_audio: bool


def assemble_batch(cfg: TrainConfig, pools, rng: RngStream) -> list[TrainItem]:
    """Draw batch_size items; all randomness except the flow noise happens here.

    ``pools`` is anything with sample(pool_tag, rng, clip_len) -> ClipPair.
    With single_pool set, the pool is a coin flip at the marginal rate the
    threshold would induce, cutting the tau-pool coupling while keeping the
    same overall mix.
    """
    items = []
    pseudo_rate = 1.0 - cfg.tau_threshold
    for _ in range(cfg.batch_size):
        tau = rng.uniform(0.0, 1.0)
        if cfg.single_pool:
            pool = POOL_PSEUDO if rng.uniform(0.0, 1.0) < pseudo_rate else POOL_ARBITRARY
        else:
            pool = pick_pool(tau, cfg)
        pair = pools.sample(pool, rng, cfg.clip_len)
        frame_idx = int(rng.integers(0, cfg.clip_len))
        drop_audio = bool(rng.uniform(0.0, 1.0) < cfg.audio_dropout_p)
        items.append(TrainItem(pair=pair, tau=tau, frame_idx=frame_idx, drop_audio=drop_audio))
    return items


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


@dataclass
class TrainState:
    model: LearnedVelocityModel
    adam: AdamState
    lr: float = 1e-3
    step: int = 0
    log_rows: list[dict] = field(default_factory=list)

    def param_list(self) -> list[np.ndarray]:
        """Live parameter arrays in a fixed order (weights, biases, null token)."""
        return [*self.model.mlp.weights, *self.model.mlp.biases, self.model.null_audio_token]


def _adam_update(params: list[np.ndarray], grads: list[np.ndarray], adam: AdamState, lr: float):
    adam.t += 1
    c1 = 1.0 - ADAM_BETA1**adam.t
    c2 = 1.0 - ADAM_BETA2**adam.t
    for p, g, m, v in zip(params, grads, adam.m, adam.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def cfm_step(state: TrainState, batch: list[TrainItem], rng: RngStream) -> tuple[TrainState, float]:
    """One optimization step on a pre-assembled batch.

    Draws the flow noise here (one eps per item, in batch order), forms the
    interpolated states and velocity targets, and applies an Adam update on
    the mean squared velocity error (mean over pixels and batch). A zero
    learning rate leaves the parameters bitwise untouched, which turns the
    loop into a pure evaluation pass.
    """
    if not batch:
        raise ContractError("empty batch")
    model = state.model
    n_pix = model.n_pixels
    inputs = np.empty((len(batch), 2 * n_pix + model.audio_dim + TAU_EMBED_DIM))
    targets = np.empty((len(batch), n_pix))
    token_rows = []
    for row, item in enumerate(batch):
        clean = item.pair.target_clip[item.frame_idx]
        cond = item.pair.cond_clip[item.frame_idx]
        x_tau, eps = fm_add(clean, item.tau, rng)
        targets[row] = velocity_target(clean, eps).values
        if item.drop_audio:
            audio = None
            token_rows.append(row)
        else:
            audio = item.pair.target_audio.features[item.frame_idx]
        inputs[row] = model.input_vector(x_tau.values, cond.values, audio, item.tau)

    pred = mlp_forward(model.mlp, inputs)
    residual = pred - targets
    loss = float(np.mean(residual**2))
    if not np.isfinite(loss):
        taus = ", ".join(f"{item.tau:.4f}" for item in batch)
        raise NumericError(f"non-finite training loss (batch taus: {taus})")

    out_grad = (2.0 / residual.size) * residual
    param_grads, input_grad = mlp_backward(model.mlp, inputs, out_grad)
    token_slice = slice(2 * n_pix, 2 * n_pix + model.audio_dim)
    token_grad = (
        input_grad[token_rows, token_slice].sum(axis=0)
        if token_rows
        else np.zeros(model.audio_dim)
    )
    grads = [gw for gw, _ in param_grads] + [gb for _, gb in param_grads] + [token_grad]
    _adam_update(state.param_list(), grads, state.adam, state.lr)
    return state, loss


def train(
    cfg: TrainConfig,
    pools,
    checkpoint_path: Path | str,
    log_path: Path | str | None = None,
    resume_from: Path | str | None = None,
    start_step: int = 0,
    time_budget_s: float | None = None,
) -> TrainState:
    """Run cfg.n_steps optimization steps and keep the checkpoint current.

    The checkpoint file is probed for writability before any work happens.
    Steps are numbered from start_step so a resumed run replays the exact
    noise streams the uninterrupted run would have used. The loss log (one
    row per step: step, tau_mean, pool_frac_pseudo, loss) is written at the
    end when log_path is given.
    """
    checkpoint_path = Path(checkpoint_path)
    try:
        checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        with open(checkpoint_path, "ab"):
            pass
    except OSError as exc:
        raise DataIOError(f"checkpoint path {checkpoint_path} is not writable: {exc}") from exc
    if log_path is not None:
        try:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            with open(Path(log_path), "ab"):
                pass
        except OSError as exc:
            raise DataIOError(f"loss log path {log_path} is not writable: {exc}") from exc

    if resume_from is not None:
        model = load_checkpoint(resume_from)
    else:
        model = init_velocity_model(
            cfg.frame_h, cfg.frame_w, cfg.hidden, RngStream(cfg.seed, INIT_STREAM), cfg.audio_dim
        )
    state = TrainState(model=model, adam=AdamState.zeros_like([]), lr=cfg.learning_rate)
    state.adam = AdamState.zeros_like(state.param_list())
    state.step = start_step

    t0 = time.monotonic()
    for s in range(start_step, start_step + cfg.n_steps):
        rng = RngStream(cfg.seed, s)
        batch = assemble_batch(cfg, pools, rng)
        try:
            state, loss = cfm_step(state, batch, rng)
        except NumericError as exc:
            raise NumericError(f"step {s}: {exc}") from exc
        state.step = s + 1
        frac = sum(1 for it in batch if it.pair.pool_tag == POOL_PSEUDO) / len(batch)
        state.log_rows.append(
            {
                "step": s,
                "tau_mean": float(np.mean([it.tau for it in batch])),
                "pool_frac_pseudo": frac,
                "loss": loss,
            }
        )
        if cfg.ckpt_every > 0 and (s + 1 - start_step) % cfg.ckpt_every == 0:
            save_checkpoint(state.model, checkpoint_path)
        if time_budget_s is not None and time.monotonic() - t0 > time_budget_s:
            break

    save_checkpoint(state.model, checkpoint_path)
    if log_path is not None:
        write_loss_log(state.log_rows, log_path)
    return state


def write_loss_log(rows: list[dict], path: Path | str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOSS_LOG_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow(
                    {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
                )
    except OSError as exc:
        raise DataIOError(f"cannot write loss log {path}: {exc}") from exc


def read_loss_log(path: Path | str) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != LOSS_LOG_COLUMNS:
                raise DataIOError(f"{path}: unexpected loss log columns {reader.fieldnames}")
            return [
                {
                    "step": int(r["step"]),
                    "tau_mean": float(r["tau_mean"]),
                    "pool_frac_pseudo": float(r["pool_frac_pseudo"]),
                    "loss": float(r["loss"]),
                }
                for r in reader
            ]
    except OSError as exc:
        raise DataIOError(f"cannot read loss log {path}: {exc}") from exc


def smoothed_loss_ratio(losses: list[float], window: int = 50) -> tuple[float, float, float]:
    """(initial, final, final/initial) with each end averaged over ``window``
    steps to keep single-batch noise out of the comparison."""
    if len(losses) < 2 * window:
        raise ContractError(f"need at least {2 * window} losses, got {len(losses)}")
    initial = float(np.mean(losses[:window]))
    final = float(np.mean(losses[-window:]))
    return initial, final, final / initial
