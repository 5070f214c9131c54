"""Flat key = value run configuration.

One namespace, keys spelled section.key, every key having a typed default.
Files are plain text: one assignment per line, '#' comments, blank lines
ignored. Unknown keys are rejected by name instead of being silently
dropped, and parse(serialize(cfg)) == cfg holds exactly because floats are
written with repr.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError, DataIOError
from .facegen import FaceGenConfig
from .guidance import GuidanceConfig, SpatialProfile, spatial_profile
from .sampler import SamplerConfig
from .training import TrainConfig

DEFAULTS: dict[str, object] = {
    # procedural face domain
    "data.frame_h": 32,
    "data.frame_w": 32,
    "data.clip_len": 8,
    "data.pose_max": 4,
    "data.mouth_cx": 16,
    "data.mouth_cy": 21,
    "data.mouth_rx": 6,
    "data.mouth_ry": 4,
    "data.fps": 25.0,
    "data.audio_noise_std": 0.02,
    "data.n_pseudo": 8,
    "data.n_arbitrary": 8,
    "data.seed": 0,
    # velocity model
    "model.hidden": "1536",
    "model.audio_dim": 1,
    # optimization
    "train.threshold": 0.85,
    "train.lr": 0.001,
    "train.batch": 32,
    "train.steps": 2000,
    "train.dropout": 0.1,
    "train.seed": 0,
    "train.ckpt_every": 500,
    "train.single_pool": False,
    # synthesis
    "sample.tau_start": 0.92,
    "sample.steps": 50,
    "sample.seed": 0,
    "sample.trace": False,
    # guidance
    "guidance.mode": "dscfg",
    "guidance.omega_peak": 3.0,
    "guidance.gamma": 1.5,
    "guidance.sigma": 9.0,
    "guidance.s_base": 0.1,
    "guidance.static_scale": 1.0,
    # ablation study
    "ablate.eval_clips": 20,
    "ablate.clip_len": 16,
    "ablate.eval_seed": 777,
    "ablate.low_static": 0.5,
    "ablate.high_static": 8.0,
    "ablate.train_steps": 2000,
    "ablate.bootstrap": 1000,
}


def _coerce(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def _render(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Immutable-by-convention mapping of all run settings."""

    def __init__(self, values: dict[str, object] | None = None):
        self._values = dict(DEFAULTS)
        if values:
            for key, val in values.items():
                if key not in DEFAULTS:
                    raise ConfigError(f"unknown config key: {key}")
                self._values[key] = val

    def __getitem__(self, key: str) -> object:
        if key not in self._values:
            raise ConfigError(f"unknown config key: {key}")
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """New config with string overrides applied (same coercion as files)."""
        merged = dict(self._values)
        for key, raw in overrides.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            merged[key] = _coerce(key, raw)
        return RunConfig(merged)

    # -- typed views -------------------------------------------------------

    def facegen_cfg(self) -> FaceGenConfig:
        return FaceGenConfig(
            frame_h=self["data.frame_h"],
            frame_w=self["data.frame_w"],
            mouth_cx=self["data.mouth_cx"],
            mouth_cy=self["data.mouth_cy"],
            mouth_rx=self["data.mouth_rx"],
            mouth_ry=self["data.mouth_ry"],
            pose_max=self["data.pose_max"],
            fps=self["data.fps"],
            audio_noise_std=self["data.audio_noise_std"],
        )

    def hidden_sizes(self) -> tuple[int, ...]:
        raw = str(self["model.hidden"]).strip()
        try:
            sizes = tuple(int(part) for part in raw.split(",") if part.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for model.hidden: {raw!r}") from exc
        if not sizes or any(s < 1 for s in sizes):
            raise ConfigError(f"model.hidden needs positive sizes, got {raw!r}")
        return sizes

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(
            tau_threshold=self["train.threshold"],
            learning_rate=self["train.lr"],
            batch_size=self["train.batch"],
            n_steps=self["train.steps"],
            audio_dropout_p=self["train.dropout"],
            seed=self["train.seed"],
            clip_len=self["data.clip_len"],
            ckpt_every=self["train.ckpt_every"],
            single_pool=self["train.single_pool"],
            hidden=self.hidden_sizes(),
            frame_h=self["data.frame_h"],
            frame_w=self["data.frame_w"],
            audio_dim=self["model.audio_dim"],
        )

    def spatial(self) -> SpatialProfile:
        # Guidance is aimed at the configured mouth center; per-clip pose
        # offsets shift the true mouth by at most pose_max pixels, well
        # inside the default sigma.
        return spatial_profile(
            (self["data.mouth_cx"], self["data.mouth_cy"]),
            self["guidance.sigma"],
            self["guidance.s_base"],
            (self["data.frame_h"], self["data.frame_w"]),
        )

    def guidance_cfg(self, mode: str | None = None, static_scale: float | None = None) -> GuidanceConfig:
        mode = self["guidance.mode"] if mode is None else mode
        return GuidanceConfig(
            mode=mode,
            omega_peak=self["guidance.omega_peak"],
            gamma=self["guidance.gamma"],
            static_scale=self["guidance.static_scale"] if static_scale is None else static_scale,
            spatial=self.spatial() if mode == "dscfg" else None,
        )

    def sampler_cfg(self, guidance: GuidanceConfig | None = None) -> SamplerConfig:
        return SamplerConfig(
            tau_start=self["sample.tau_start"],
            n_steps=self["sample.steps"],
            seed=self["sample.seed"],
            guidance=self.guidance_cfg() if guidance is None else guidance,
        )


def parse_config(text: str) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        if key in values:
            raise ConfigError(f"duplicate config key: {key}")
        values[key] = _coerce(key, raw)
    return RunConfig(values)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    last_section = None
    for key in sorted(DEFAULTS):
        section = key.split(".", 1)[0]
        if section != last_section:
            if last_section is not None:
                lines.append("")
            last_section = section
        lines.append(f"{key} = {_render(cfg[key])}")
    return "\n".join(lines) + "\n"


def load_config(path: Path | str) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def write_resolved_config(cfg: RunConfig, out_dir: Path | str) -> Path:
    """Drop the fully resolved settings next to a run's outputs."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "run_config.txt"
        path.write_text(serialize_config(cfg))
    except OSError as exc:
        raise DataIOError(f"cannot write resolved config in {out_dir}: {exc}") from exc
    return path
