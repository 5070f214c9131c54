"""Procedural talking-face domain: rendering, measurement, data pools.

A face is a seeded band-limited texture (the "identity") with an axis-aligned
ellipse mouth. The mouth's open interior is a concentric sub-ellipse whose
vertical extent is ``aperture`` times the full extent, so the open fraction of
the ellipse area equals the aperture too, which is what makes the render and
measure operations inverse to each other up to pixel quantization.

Audio at this scale is the aperture drive itself: one scalar per frame, equal
to the target aperture trajectory plus small observation noise. That gap is
deliberate; it is what classifier-free guidance has to work against.

Pools:
    pseudo_paired  same identity and pose on both sides, apertures differ.
    arbitrary      cond and target drawn independently.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIOError, GeometryError, ShapeError
from .numerics import Grid2D, RngStream

POOL_PSEUDO = "pseudo_paired"
POOL_ARBITRARY = "arbitrary"
POOL_TAGS = (POOL_PSEUDO, POOL_ARBITRARY)

# Rendering constants. Lips are light, the open mouth interior is dark, and
# measurement counts "dark" below the midpoint, so the three must stay well
# separated. Texture values are kept away from both extremes.
LIP_VALUE = 0.85
OPEN_VALUE = 0.05
DARK_THRESHOLD = 0.5

# Identity texture family: a few random plane waves in a low-frequency band.
# Band-limited on purpose; smooth textures keep the denoising task learnable
# by a small MLP while distinct seeds stay near-uncorrelated.
_TEXTURE_WAVES = 6
_TEXTURE_WAVELENGTH = (10.0, 24.0)
_TEXTURE_CONTRAST = 0.15
_TEXTURE_STREAM_ID = 0xFACE

# Aperture trajectories are sinusoids resampled until they actually move;
# a near-flat segment would make the audio-vs-aperture correlation contract
# meaningless on short clips.
_TRAJ_MIN_STD = 0.15
_TRAJ_TRIES = 16
_AUDIO_MIN_CORR = 0.992


@dataclass(frozen=True)
class FaceGenConfig:
    """Knobs for pool sampling. Mouth geometry is shared by every face."""

    frame_h: int = 32
    frame_w: int = 32
    mouth_cx: int = 16
    mouth_cy: int = 21
    mouth_rx: int = 6
    mouth_ry: int = 4
    pose_max: int = 4
    fps: float = 25.0
    audio_noise_std: float = 0.02

    def __post_init__(self):
        if self.audio_noise_std < 0 or self.audio_noise_std > 0.02:
            raise ContractError("audio_noise_std must lie in [0, 0.02]")
        if self.pose_max < 0:
            raise ContractError("pose_max must be >= 0")


@dataclass(frozen=True)
class FaceSpec:
    """Everything needed to render one identity at one pose."""

    identity_seed: int
    pose: tuple[int, int]
    mouth_center: tuple[int, int]  # (x_m, y_m), pose-relative
    mouth_radii: tuple[int, int]  # (rx, ry)
    frame_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        h, w = self.frame_size
        rx, ry = self.mouth_radii
        if h <= 0 or w <= 0:
            raise GeometryError(f"frame size must be positive, got {self.frame_size}")
        if rx < 1 or ry < 1:
            raise GeometryError(f"mouth radii must be >= 1 pixel, got {self.mouth_radii}")
        cx, cy = self.effective_center
        if cx - rx < 0 or cx + rx > w - 1 or cy - ry < 0 or cy + ry > h - 1:
            raise GeometryError(
                f"mouth ellipse at center {(cx, cy)} radii {self.mouth_radii} "
                f"leaves the {h}x{w} frame"
            )

    @property
    def effective_center(self) -> tuple[int, int]:
        """Mouth center after the pose shift, (x, y)."""
        return (self.mouth_center[0] + self.pose[0], self.mouth_center[1] + self.pose[1])


@dataclass(frozen=True, eq=False)
class AudioTrack:
    """Per-frame feature vectors driving the mouth; dimension 1 by default."""

    features: np.ndarray
    fps: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, AudioTrack):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.features, other.features)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeError(f"audio features must be (n_frames, dim), got {feats.shape}")
        if feats.size and (feats.min() < 0.0 or feats.max() > 1.0):
            raise ContractError("audio feature values must lie in [0, 1]")
        if self.fps <= 0:
            raise ContractError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "features", feats)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class ClipPair:
    """A conditioning clip and a target clip drawn from one pool.

    The two trailing spec fields are not part of the pair's identity; they
    ride along so datasets and evaluations can recover geometry without
    re-deriving it.
    """

    cond_clip: tuple[Grid2D, ...]
    target_clip: tuple[Grid2D, ...]
    target_audio: AudioTrack
    pool_tag: str
    ground_truth_apertures: np.ndarray
    cond_spec: FaceSpec
    target_spec: FaceSpec

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClipPair):
            return NotImplemented
        return (
            self.pool_tag == other.pool_tag
            and self.cond_clip == other.cond_clip
            and self.target_clip == other.target_clip
            and self.target_audio == other.target_audio
            and np.array_equal(self.ground_truth_apertures, other.ground_truth_apertures)
        )

    def __post_init__(self):
        if self.pool_tag not in POOL_TAGS:
            raise ContractError(f"unknown pool tag {self.pool_tag!r}")
        n = len(self.target_clip)
        if len(self.cond_clip) != n:
            raise ShapeError("cond and target clips differ in length")
        if self.target_audio.n_frames != n:
            raise ShapeError("audio length does not match clip length")
        apertures = np.asarray(self.ground_truth_apertures, dtype=np.float64)
        if apertures.shape != (n,):
            raise ShapeError("need one ground-truth aperture per target frame")
        object.__setattr__(self, "ground_truth_apertures", apertures)

    @property
    def clip_len(self) -> int:
        return len(self.target_clip)


# ---------------------------------------------------------------------------
# Rendering and measurement
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _pixel_coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w]
    return xx.astype(np.float64), yy.astype(np.float64)


@functools.lru_cache(maxsize=4096)
def _texture_waves(identity_seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-identity plane-wave parameters (ux, uy in cycles/px, phase)."""
    rng = RngStream(identity_seed, _TEXTURE_STREAM_ID)
    wavelength = rng.uniform(*_TEXTURE_WAVELENGTH, n=_TEXTURE_WAVES)
    angle = rng.uniform(0.0, 2.0 * np.pi, n=_TEXTURE_WAVES)
    phase = rng.uniform(0.0, 2.0 * np.pi, n=_TEXTURE_WAVES)
    return np.cos(angle) / wavelength, np.sin(angle) / wavelength, phase


@functools.lru_cache(maxsize=256)
def _texture_field(identity_seed: int, h: int, w: int, dx: int, dy: int) -> np.ndarray:
    """Identity texture translated by the pose, as a read-only (h, w) array."""
    ux, uy, phase = _texture_waves(identity_seed)
    xx, yy = _pixel_coords(h, w)
    arg = (
        2.0 * np.pi * ((xx[..., None] - dx) * ux + (yy[..., None] - dy) * uy) + phase
    )
    amp = _TEXTURE_CONTRAST / np.sqrt(0.5)
    tex = 0.5 + amp * np.sin(arg).sum(axis=-1) / np.sqrt(_TEXTURE_WAVES)
    tex = np.clip(tex, 0.02, 0.98)
    tex.setflags(write=False)
    return tex


def _mouth_masks(spec: FaceSpec, aperture: float) -> tuple[np.ndarray, np.ndarray]:
    """(ellipse mask, open-interior mask), both (H, W) booleans."""
    h, w = spec.frame_size
    rx, ry = spec.mouth_radii
    cx, cy = spec.effective_center
    xx, yy = _pixel_coords(h, w)
    nx = (xx - cx) / rx
    ny = (yy - cy) / ry
    ellipse = nx**2 + ny**2 <= 1.0
    if aperture <= 0.0:
        open_mask = np.zeros_like(ellipse)
    else:
        # Tiny apertures overflow (ny/aperture)**2 to inf; the comparison
        # still excludes those pixels, so the overflow is benign.
        with np.errstate(over="ignore"):
            open_mask = nx**2 + (ny / aperture) ** 2 <= 1.0
    return ellipse, open_mask


def render_face(spec: FaceSpec, aperture: float) -> Grid2D:
    """Render one frame: identity texture, light lips, dark open interior.

    The open interior is the concentric sub-ellipse with vertical semi-axis
    aperture*ry, so both the open fraction of the vertical extent and the
    open fraction of the ellipse area equal the aperture.
    """
    aperture = float(aperture)
    if not 0.0 <= aperture <= 1.0:
        raise ContractError(f"aperture must lie in [0, 1], got {aperture}")
    h, w = spec.frame_size
    frame = _texture_field(spec.identity_seed, h, w, *spec.pose).copy()
    ellipse, open_mask = _mouth_masks(spec, aperture)
    frame[ellipse] = LIP_VALUE
    frame[open_mask] = OPEN_VALUE
    return Grid2D(h, w, frame.reshape(-1))


def measure_aperture(frame: Grid2D, spec: FaceSpec) -> float:
    """Dark fraction of the mouth ellipse; the synthetic landmark readout.

    Works on any frame at the spec's geometry, including model outputs, and
    always returns a value in [0, 1].
    """
    if frame.shape != spec.frame_size:
        raise ShapeError(f"frame {frame.shape} does not match spec {spec.frame_size}")
    ellipse, _ = _mouth_masks(spec, 1.0)
    inside = frame.as_matrix()[ellipse]
    dark = np.count_nonzero(inside < DARK_THRESHOLD)
    return float(min(1.0, max(0.0, dark / inside.size)))


def mouth_bbox(spec: FaceSpec) -> tuple[int, int, int, int]:
    """Inclusive (y0, y1, x0, x1) bounds of the pose-shifted mouth ellipse."""
    cx, cy = spec.effective_center
    rx, ry = spec.mouth_radii
    return (cy - ry, cy + ry, cx - rx, cx + rx)


def outside_mouth_mask(spec: FaceSpec) -> np.ndarray:
    """(H, W) boolean mask, True outside the mouth bounding box."""
    h, w = spec.frame_size
    y0, y1, x0, x1 = mouth_bbox(spec)
    mask = np.ones((h, w), dtype=bool)
    mask[y0 : y1 + 1, x0 : x1 + 1] = False
    return mask


def render_clip(spec: FaceSpec, apertures) -> tuple[Grid2D, ...]:
    return tuple(render_face(spec, a) for a in np.asarray(apertures, dtype=np.float64))


# ---------------------------------------------------------------------------
# Pool sampling
# ---------------------------------------------------------------------------


def sample_face_spec(rng: RngStream, cfg: FaceGenConfig) -> FaceSpec:
    identity_seed = rng.integers(0, 2**63)
    p = cfg.pose_max
    pose = (rng.integers(-p, p + 1), rng.integers(-p, p + 1))
    return FaceSpec(
        identity_seed=identity_seed,
        pose=pose,
        mouth_center=(cfg.mouth_cx, cfg.mouth_cy),
        mouth_radii=(cfg.mouth_rx, cfg.mouth_ry),
        frame_size=(cfg.frame_h, cfg.frame_w),
    )


def sample_aperture_trajectory(rng: RngStream, n: int, fps: float) -> np.ndarray:
    """A smooth aperture curve with guaranteed minimum variation (n >= 2)."""
    if n < 1:
        raise ContractError(f"trajectory length must be >= 1, got {n}")
    t = np.arange(n) / fps
    traj = None
    for _ in range(_TRAJ_TRIES):
        amp = rng.uniform(0.30, 0.42)
        freq = rng.uniform(1.5, 3.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        traj = 0.5 + amp * np.sin(2.0 * np.pi * freq * t + phase)
        if n < 2 or traj.std() >= _TRAJ_MIN_STD:
            break
    return np.clip(traj, 0.0, 1.0)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))


def _make_audio(traj: np.ndarray, rng: RngStream, cfg: FaceGenConfig) -> AudioTrack:
    """Aperture drive with observation noise, correlation kept above contract.

    Noise std stays <= the configured bound; on pathologically short or
    unlucky clips the drawn noise is halved until the empirical correlation
    clears the contract with margin, which always terminates.
    """
    noise = rng.normal(traj.size) * cfg.audio_noise_std
    for _ in range(40):
        feats = np.clip(traj + noise, 0.0, 1.0)
        if traj.size < 3 or _pearson(feats, traj) >= _AUDIO_MIN_CORR:
            break
        noise *= 0.5
    return AudioTrack(features=feats[:, None], fps=cfg.fps)


def sample_clip_pair(
    pool: str,
    rng: RngStream,
    clip_len: int,
    cfg: FaceGenConfig = FaceGenConfig(),
) -> ClipPair:
    """Draw one ClipPair from the named pool. Deterministic per stream."""
    if pool not in POOL_TAGS:
        raise ContractError(f"unknown pool tag {pool!r}")
    if clip_len < 1:
        raise ContractError(f"clip_len must be >= 1, got {clip_len}")
    cond_spec = sample_face_spec(rng, cfg)
    target_spec = cond_spec if pool == POOL_PSEUDO else sample_face_spec(rng, cfg)
    cond_traj = sample_aperture_trajectory(rng, clip_len, cfg.fps)
    target_traj = sample_aperture_trajectory(rng, clip_len, cfg.fps)
    audio = _make_audio(target_traj, rng, cfg)
    return ClipPair(
        cond_clip=render_clip(cond_spec, cond_traj),
        target_clip=render_clip(target_spec, target_traj),
        target_audio=audio,
        pool_tag=pool,
        ground_truth_apertures=target_traj,
        cond_spec=cond_spec,
        target_spec=target_spec,
    )


# ---------------------------------------------------------------------------
# PGM and sidecar CSV export
# ---------------------------------------------------------------------------


def write_pgm(path: Path | str, frame: Grid2D) -> None:
    """Binary PGM (P5), 8-bit, maxval 255. Values are clamped then quantized."""
    data = np.clip(frame.values, 0.0, 1.0)
    data = np.rint(data * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path | str) -> Grid2D:
    """Read a binary PGM written by write_pgm back to values in [0, 1]."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read PGM {path}: {exc}") from exc
    # Header is three whitespace-separated tokens after the magic; comment
    # lines are allowed by the format.
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4 and pos < len(raw):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if len(tokens) != 4 or tokens[0] != b"P5":
        raise DataIOError(f"{path} is not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataIOError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(raw[pos : pos + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise DataIOError(f"{path}: truncated pixel data")
    return Grid2D(height, width, pixels.astype(np.float64) / 255.0)


def write_clip(
    clip_dir: Path | str,
    frames,
    apertures,
    audio: AudioTrack | None = None,
) -> None:
    """Write numbered PGM frames plus the aperture/audio sidecar CSV."""
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    apertures = np.asarray(apertures, dtype=np.float64)
    if len(frames) != apertures.size:
        raise ShapeError("one aperture per frame required")
    if audio is not None and audio.n_frames != len(frames):
        raise ShapeError("audio length does not match clip")
    for i, frame in enumerate(frames):
        write_pgm(clip_dir / f"frame_{i:03d}.pgm", frame)
    header = "frame_idx,aperture"
    if audio is not None:
        header += "," + ",".join(f"audio_{j}" for j in range(audio.dim))
    lines = [header]
    for i in range(len(frames)):
        row = f"{i},{float(apertures[i])!r}"
        if audio is not None:
            row += "," + ",".join(repr(float(v)) for v in audio.features[i])
        lines.append(row)
    (clip_dir / "clip.csv").write_text("\n".join(lines) + "\n")


def read_sidecar(csv_path: Path | str) -> tuple[np.ndarray, np.ndarray | None]:
    """Parse a clip sidecar CSV into (apertures, audio features or None)."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataIOError(f"missing sidecar {csv_path}")
    rows = [line.split(",") for line in csv_path.read_text().strip().splitlines()]
    if not rows or rows[0][:2] != ["frame_idx", "aperture"]:
        raise DataIOError(f"{csv_path}: expected frame_idx,aperture[,audio_*] header")
    header, body = rows[0], rows[1:]
    try:
        apertures = np.array([float(r[1]) for r in body])
        audio_cols = [i for i, name in enumerate(header) if name.startswith("audio_")]
        audio = None
        if audio_cols:
            audio = np.array([[float(r[i]) for i in audio_cols] for r in body])
    except (ValueError, IndexError) as exc:
        raise DataIOError(f"{csv_path}: malformed sidecar row ({exc})") from exc
    return apertures, audio


def read_clip(clip_dir: Path | str) -> tuple[tuple[Grid2D, ...], np.ndarray, np.ndarray | None]:
    """Read back (frames, apertures, audio features or None)."""
    clip_dir = Path(clip_dir)
    paths = sorted(clip_dir.glob("frame_*.pgm"))
    if not paths:
        raise DataIOError(f"no frames found in {clip_dir}")
    frames = tuple(read_pgm(p) for p in paths)
    apertures, audio = read_sidecar(clip_dir / "clip.csv")
    if apertures.size != len(frames):
        raise DataIOError(f"{clip_dir}/clip.csv: row count does not match frame count")
    return frames, apertures, audio
