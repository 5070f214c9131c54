"""On-disk clip-pair datasets and the sampling pools used by training.

Layout under a dataset root:

    manifest.csv                 clip_id,path,pool,clip_len
    pairs/pair_0000/cond/        frame_000.pgm ... clip.csv meta.csv
    pairs/pair_0000/target/      frame_000.pgm ... clip.csv meta.csv

Each clip directory is self-describing: clip.csv carries per-frame apertures
(and audio features on the target side), meta.csv carries the face geometry
needed to re-measure the frames. Training can either stream pairs straight
from the procedural generator or draw from a directory written here; both
paths expose the same sample(pool, rng, clip_len) surface.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIOError
from .facegen import (
    POOL_ARBITRARY,
    POOL_PSEUDO,
    AudioTrack,
    ClipPair,
    FaceGenConfig,
    FaceSpec,
    measure_aperture,
    read_clip,
    sample_clip_pair,
    write_clip,
)
from .numerics import RngStream

MANIFEST_COLUMNS = ("clip_id", "path", "pool", "clip_len")

# Stream id offset for held-out evaluation pairs so they never collide with
# dataset pair streams under the same seed.
EVAL_STREAM_BASE = 2**40


def write_spec_meta(spec: FaceSpec, fps: float, path: Path | str) -> None:
    rows = [
        ("identity_seed", spec.identity_seed),
        ("pose_dx", spec.pose[0]),
        ("pose_dy", spec.pose[1]),
        ("mouth_cx", spec.mouth_center[0]),
        ("mouth_cy", spec.mouth_center[1]),
        ("mouth_rx", spec.mouth_radii[0]),
        ("mouth_ry", spec.mouth_radii[1]),
        ("frame_h", spec.frame_size[0]),
        ("frame_w", spec.frame_size[1]),
        ("fps", repr(float(fps))),
    ]
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("key", "value"))
            writer.writerows(rows)
    except OSError as exc:
        raise DataIOError(f"cannot write meta {path}: {exc}") from exc


def read_spec_meta(path: Path | str) -> tuple[FaceSpec, float]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["key", "value"]:
                raise DataIOError(f"{path}: expected key,value header, got {header}")
            kv = {row[0]: row[1] for row in reader if row}
    except OSError as exc:
        raise DataIOError(f"cannot read meta {path}: {exc}") from exc
    try:
        spec = FaceSpec(
            identity_seed=int(kv["identity_seed"]),
            pose=(int(kv["pose_dx"]), int(kv["pose_dy"])),
            mouth_center=(int(kv["mouth_cx"]), int(kv["mouth_cy"])),
            mouth_radii=(int(kv["mouth_rx"]), int(kv["mouth_ry"])),
            frame_size=(int(kv["frame_h"]), int(kv["frame_w"])),
        )
        fps = float(kv["fps"])
    except KeyError as exc:
        raise DataIOError(f"{path}: missing meta key {exc}") from exc
    return spec, fps


def write_pair(pair: ClipPair, pair_dir: Path | str) -> None:
    pair_dir = Path(pair_dir)
    cond_dir = pair_dir / "cond"
    target_dir = pair_dir / "target"
    fps = pair.target_audio.fps
    cond_apertures = np.array([measure_aperture(f, pair.cond_spec) for f in pair.cond_clip])
    write_clip(cond_dir, pair.cond_clip, cond_apertures, audio=None)
    write_clip(
        target_dir,
        pair.target_clip,
        pair.ground_truth_apertures,
        audio=pair.target_audio,
    )
    write_spec_meta(pair.cond_spec, fps, cond_dir / "meta.csv")
    write_spec_meta(pair.target_spec, fps, target_dir / "meta.csv")


def read_pair(pair_dir: Path | str, pool: str) -> ClipPair:
    pair_dir = Path(pair_dir)
    cond_frames, _, _ = read_clip(pair_dir / "cond")
    target_frames, target_apertures, audio = read_clip(pair_dir / "target")
    cond_spec, fps = read_spec_meta(pair_dir / "cond" / "meta.csv")
    target_spec, _ = read_spec_meta(pair_dir / "target" / "meta.csv")
    if audio is None:
        raise DataIOError(f"{pair_dir}/target/clip.csv has no audio columns")
    return ClipPair(
        cond_clip=cond_frames,
        target_clip=target_frames,
        target_audio=AudioTrack(features=audio, fps=fps),
        pool_tag=pool,
        ground_truth_apertures=tuple(float(a) for a in target_apertures),
        cond_spec=cond_spec,
        target_spec=target_spec,
    )


def write_dataset(
    out_dir: Path | str,
    n_pseudo: int,
    n_arbitrary: int,
    clip_len: int,
    seed: int,
    cfg: FaceGenConfig = FaceGenConfig(),
    force: bool = False,
) -> list[dict]:
    """Generate and store n_pseudo + n_arbitrary pairs; returns manifest rows.

    Refuses to touch an existing non-empty directory unless force is set.
    Pair i is drawn from its own stream (seed, i), so the dataset content is
    a pure function of (seed, counts, cfg).
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataIOError(
            f"{out_dir} already exists and is not empty; pass force to overwrite"
        )
    if n_pseudo < 0 or n_arbitrary < 0 or n_pseudo + n_arbitrary == 0:
        raise ContractError(
            f"need a positive number of pairs, got pseudo={n_pseudo} arbitrary={n_arbitrary}"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_pseudo + n_arbitrary):
        pool = POOL_PSEUDO if i < n_pseudo else POOL_ARBITRARY
        rng = RngStream(seed, i)
        pair = sample_clip_pair(pool, rng, clip_len, cfg)
        clip_id = f"pair_{i:04d}"
        rel_path = f"pairs/{clip_id}"
        write_pair(pair, out_dir / rel_path)
        rows.append({"clip_id": clip_id, "path": rel_path, "pool": pool, "clip_len": clip_len})
    try:
        with open(out_dir / "manifest.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise DataIOError(f"cannot write manifest: {exc}") from exc
    return rows


def read_manifest(dataset_dir: Path | str) -> list[dict]:
    path = Path(dataset_dir) / "manifest.csv"
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
                raise DataIOError(f"{path}: unexpected manifest columns {reader.fieldnames}")
            rows = [dict(r) for r in reader]
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    for row in rows:
        row["clip_len"] = int(row["clip_len"])
        if row["pool"] not in (POOL_PSEUDO, POOL_ARBITRARY):
            raise DataIOError(f"{path}: unknown pool tag {row['pool']!r}")
    return rows


def verify_dataset(dataset_dir: Path | str) -> int:
    """Re-scan a dataset and cross-check manifest pool tags against contents.

    A pseudo-paired entry must share identity and pose across cond/target;
    an arbitrary entry must differ in at least one. Returns the number of
    pairs checked.
    """
    dataset_dir = Path(dataset_dir)
    rows = read_manifest(dataset_dir)
    for row in rows:
        pair_dir = dataset_dir / row["path"]
        cond_spec, _ = read_spec_meta(pair_dir / "cond" / "meta.csv")
        target_spec, _ = read_spec_meta(pair_dir / "target" / "meta.csv")
        matched = (
            cond_spec.identity_seed == target_spec.identity_seed
            and cond_spec.pose == target_spec.pose
        )
        if row["pool"] == POOL_PSEUDO and not matched:
            raise ContractError(
                f"{row['clip_id']} is tagged {POOL_PSEUDO} but cond/target specs differ"
            )
        if row["pool"] == POOL_ARBITRARY and matched:
            raise ContractError(
                f"{row['clip_id']} is tagged {POOL_ARBITRARY} but cond/target specs match"
            )
        n_frames = len(list((pair_dir / "target").glob("frame_*.pgm")))
        if n_frames != row["clip_len"]:
            raise ContractError(
                f"{row['clip_id']}: manifest says {row['clip_len']} frames, found {n_frames}"
            )
    return len(rows)


# ---------------------------------------------------------------------------
# Sampling pools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProceduralPools:
    """Endless pools backed by the generator; every draw is a fresh pair."""

    cfg: FaceGenConfig = FaceGenConfig()

    def sample(self, pool: str, rng: RngStream, clip_len: int) -> ClipPair:
        return sample_clip_pair(pool, rng, clip_len, self.cfg)


class DatasetPools:
    """Pools over a stored dataset; draws pick uniformly within the pool."""

    def __init__(self, dataset_dir: Path | str):
        self.dataset_dir = Path(dataset_dir)
        rows = read_manifest(self.dataset_dir)
        self._by_pool: dict[str, list[dict]] = {POOL_PSEUDO: [], POOL_ARBITRARY: []}
        for row in rows:
            self._by_pool[row["pool"]].append(row)
        self._cache: dict[str, ClipPair] = {}

    def pool_size(self, pool: str) -> int:
        return len(self._by_pool.get(pool, ()))

    def sample(self, pool: str, rng: RngStream, clip_len: int) -> ClipPair:
        entries = self._by_pool.get(pool)
        if not entries:
            raise ContractError(f"dataset {self.dataset_dir} has no {pool} pairs")
        row = entries[int(rng.integers(0, len(entries)))]
        if clip_len > row["clip_len"]:
            raise ContractError(
                f"{row['clip_id']} holds {row['clip_len']} frames, need {clip_len}"
            )
        pair = self._cache.get(row["clip_id"])
        if pair is None:
            pair = read_pair(self.dataset_dir / row["path"], row["pool"])
            self._cache[row["clip_id"]] = pair
        if clip_len == row["clip_len"]:
            return pair
        return ClipPair(
            cond_clip=pair.cond_clip[:clip_len],
            target_clip=pair.target_clip[:clip_len],
            target_audio=AudioTrack(
                features=pair.target_audio.features[:clip_len], fps=pair.target_audio.fps
            ),
            pool_tag=pair.pool_tag,
            ground_truth_apertures=pair.ground_truth_apertures[:clip_len],
            cond_spec=pair.cond_spec,
            target_spec=pair.target_spec,
        )


def make_eval_pairs(
    n_pairs: int, clip_len: int, seed: int, cfg: FaceGenConfig = FaceGenConfig()
) -> list[ClipPair]:
    """Held-out pseudo-paired clips for evaluation: the cond clip acts as the
    source footage, the target trajectory and audio as the dubbing track."""
    if n_pairs < 1:
        raise ContractError(f"need at least one eval pair, got {n_pairs}")
    return [
        sample_clip_pair(POOL_PSEUDO, RngStream(seed, EVAL_STREAM_BASE + i), clip_len, cfg)
        for i in range(n_pairs)
    ]


def source_apertures_of(pair: ClipPair) -> np.ndarray:
    """Apertures of the cond clip, measured from its frames."""
    return np.array([measure_aperture(f, pair.cond_spec) for f in pair.cond_clip])
