"""
On-disk video datasets.

Layout: one directory per video holding ``frame_NNNNN.png`` (8-bit RGB) and,
for synthetic videos, ``flow_NNNNN.bin`` / ``seg_NNNNN.bin`` matrices plus
``meta.json`` with the sprite states. ``manifest.tsv`` at the root lists
``id, path, frames, fps`` per video and is written last; a ``.incomplete``
marker stays behind when generation fails.

Synthetic generation uses a process pool so each video is rendered and written
in an isolated worker.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Iterable

import numpy as np

from ._io import (
    atomic_write_text,
    iter_text_lines,
    read_matrix,
    read_png,
    write_matrix,
    write_png,
)
from .config import SpritesConfig
from .errors import DatasetError, classify_exception, error_record
from .sprites import random_world, synth_step, world_state

MANIFEST = "manifest.tsv"
INCOMPLETE = ".incomplete"
_MAX_WORKERS = 8

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VideoRecord:
    """One manifest row."""

    id: str
    path: Path
    frames: int
    fps: float


def _clamp_workers(workers: int) -> int:
    if workers < 1:
        return 1
    cap = min(os.cpu_count() or 1, _MAX_WORKERS)
    return min(workers, cap)


def video_seed(seed: int, index: int) -> int:
    """Per-video generator seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def frame_name(index: int) -> str:
    return f"frame_{index:05d}.png"


def encode_flow(flow: np.ndarray) -> np.ndarray:
    """(H, W, 2) flow as an (H, 2W) matrix with dx, dy interleaved per pixel."""
    h, w, _ = flow.shape
    return np.ascontiguousarray(flow, dtype=np.float32).reshape(h, 2 * w)


def decode_flow(matrix: np.ndarray) -> np.ndarray:
    h, w2 = matrix.shape
    return matrix.reshape(h, w2 // 2, 2)


def write_sprite_video(
    directory: Path,
    cfg: SpritesConfig,
    num_frames: int,
    seed: int,
    *,
    patch_size: int = 8,
) -> int:
    """Render one world for *num_frames* frames into *directory*."""
    world = random_world(cfg, np.random.default_rng(seed), patch_size=patch_size)
    directory.mkdir(parents=True, exist_ok=True)
    states = []
    for t in range(num_frames):
        states.append(world_state(world))
        world_next, frame, flow, seg = synth_step(world)
        write_png(directory / frame_name(t), frame)
        write_matrix(directory / f"flow_{t:05d}.bin", encode_flow(flow))
        write_matrix(directory / f"seg_{t:05d}.bin", seg.astype(np.int32))
        world = world_next
    meta = {
        "canvas": cfg.canvas,
        "fps": cfg.fps,
        "direction": world.direction,
        "frames": num_frames,
        "seed": seed,
        "states": states,
    }
    atomic_write_text(directory / "meta.json", json.dumps(meta, separators=(",", ":")))
    return num_frames


def _run_one(
    root: str,
    video_id: str,
    cfg: SpritesConfig,
    num_frames: int,
    seed: int,
    patch_size: int,
) -> dict:
    """Worker entry point (module-level for pickling under spawn)."""
    start = time.monotonic_ns()
    final = Path(root) / video_id
    partial = Path(root) / f".partial-{video_id}"
    try:
        shutil.rmtree(partial, ignore_errors=True)
        frames = write_sprite_video(partial, cfg, num_frames, seed, patch_size=patch_size)
        shutil.rmtree(final, ignore_errors=True)
        os.replace(partial, final)
        elapsed_ms = (time.monotonic_ns() - start) // 1_000_000
        return {"source": video_id, "elapsed_ms": elapsed_ms, "frames": frames}
    except Exception as exc:
        shutil.rmtree(partial, ignore_errors=True)
        elapsed_ms = (time.monotonic_ns() - start) // 1_000_000
        return error_record(video_id, classify_exception(exc), elapsed_ms=elapsed_ms, exc=exc)


def write_manifest(root: Path, records: Iterable[VideoRecord]) -> Path:
    lines = ["# id\tpath\tframes\tfps"]
    for rec in records:
        path = rec.path.relative_to(root) if rec.path.is_relative_to(root) else rec.path
        lines.append(f"{rec.id}\t{path}\t{rec.frames}\t{rec.fps!r}")
    return atomic_write_text(root / MANIFEST, "\n".join(lines) + "\n")


def write_dataset(
    root: str | Path,
    cfg: SpritesConfig,
    *,
    num_videos: int | None = None,
    num_frames: int | None = None,
    seed: int = 0,
    patch_size: int = 8,
    workers: int = 1,
    progress: Callable[[str, dict], None] | None = None,
) -> dict:
    """
    Generate sprite videos under *root* concurrently.

    Video *i* is fully determined by ``(seed, i)``. Returns a summary with
    ``total``, ``succeeded``, ``failed`` and ``manifest`` (None on failure).
    """
    root = Path(root)
    num_videos = cfg.num_videos if num_videos is None else num_videos
    num_frames = cfg.num_frames if num_frames is None else num_frames
    if num_videos < 1 or num_frames < 2:
        raise DatasetError("need at least one video of at least two frames")
    root.mkdir(parents=True, exist_ok=True)
    marker = root / INCOMPLETE
    marker.write_text("generation in progress\n", encoding="utf-8")
    (root / MANIFEST).unlink(missing_ok=True)

    ids = [f"video_{i:04d}" for i in range(num_videos)]
    seeds = [video_seed(seed, i) for i in range(num_videos)]
    failed: list[str] = []
    executor = ProcessPoolExecutor(max_workers=_clamp_workers(workers))
    try:
        futures = {
            executor.submit(_run_one, str(root), vid, cfg, num_frames, s, patch_size): vid
            for vid, s in zip(ids, seeds)
        }
        for future in as_completed(futures):
            record = future.result()
            if "error" in record:
                failed.append(record["source"])
            if progress:
                progress(record["source"], record)
    except KeyboardInterrupt:
        executor.shutdown(wait=False, cancel_futures=True)
        raise
    finally:
        executor.shutdown(wait=True)

    manifest: str | None = None
    if failed:
        marker.write_text("".join(f"failed\t{vid}\n" for vid in sorted(failed)), encoding="utf-8")
    else:
        records = [VideoRecord(vid, root / vid, num_frames, cfg.fps) for vid in ids]
        manifest = str(write_manifest(root, records))
        marker.unlink(missing_ok=True)
    return {
        "total": num_videos,
        "succeeded": num_videos - len(failed),
        "failed": len(failed),
        "manifest": manifest,
    }


def read_manifest(root: str | Path) -> list[VideoRecord]:
    """Parse ``manifest.tsv``; an incomplete or unindexed dataset is an error."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    if (root / INCOMPLETE).exists():
        raise DatasetError(f"{root}: dataset is marked incomplete")
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"{root}: no {MANIFEST}")
    records = []
    for lineno, line in enumerate(iter_text_lines(manifest), start=1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetError(f"{manifest}:{lineno}: expected 4 tab-separated fields")
        vid, rel, frames, fps = parts
        path = Path(rel)
        path = path if path.is_absolute() else root / path
        records.append(VideoRecord(vid, path, int(frames), float(fps)))
    if not records:
        raise DatasetError(f"{manifest}: no videos listed")
    return records


class FrameDirVideo:
    """Random access to one video directory."""

    def __init__(self, record: VideoRecord) -> None:
        self.record = record
        self.path = record.path
        self._meta: dict | None = None

    def __len__(self) -> int:
        return self.record.frames

    @property
    def fps(self) -> float:
        return self.record.fps

    def frame(self, index: int) -> np.ndarray:
        return read_png(self.path / frame_name(index))

    def has_ground_truth(self) -> bool:
        return (self.path / "meta.json").is_file() and (self.path / "seg_00000.bin").is_file()

    def flow(self, index: int) -> np.ndarray:
        return decode_flow(read_matrix(self.path / f"flow_{index:05d}.bin"))

    def seg(self, index: int) -> np.ndarray:
        return read_matrix(self.path / f"seg_{index:05d}.bin")

    def meta(self) -> dict:
        if self._meta is None:
            meta_path = self.path / "meta.json"
            if not meta_path.is_file():
                raise DatasetError(f"{self.path}: no ground truth (meta.json)")
            self._meta = json.loads(meta_path.read_text(encoding="utf-8"))
        return self._meta


def open_videos(root: str | Path) -> list[FrameDirVideo]:
    return [FrameDirVideo(rec) for rec in read_manifest(root)]


def index_frame_dirs(root: str | Path, fps: float) -> dict:
    """
    Index existing natural-video frame directories under *root*: every
    subdirectory with ``frame_*.png`` files becomes one manifest row.
    Frames must be numbered contiguously from zero.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"frame root not found: {root}")
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        count = len(list(sub.glob("frame_*.png")))
        if count == 0:
            continue
        missing = [i for i in range(count) if not (sub / frame_name(i)).is_file()]
        if missing:
            raise DatasetError(f"{sub}: frame numbering has gaps (first missing {missing[0]})")
        records.append(VideoRecord(sub.name, sub, count, fps))
    if not records:
        raise DatasetError(f"{root}: no frame directories found")
    write_manifest(root, records)
    return {
        "total": len(records),
        "succeeded": len(records),
        "failed": 0,
        "manifest": str(root / MANIFEST),
    }


def ingest_raw_rgb24(
    stream: BinaryIO,
    width: int,
    height: int,
    directory: str | Path,
    *,
    fps: float,
    video_id: str | None = None,
) -> VideoRecord:
    """
    Split a raw ``rgb24`` byte stream (e.g. piped from a decoder) into PNG
    frames under ``directory/<video_id>`` and index it.

    Frames are staged in a hidden sibling directory; on any failure it is
    removed and an existing ``<video_id>`` is left untouched.
    """
    directory = Path(directory)
    video_id = video_id or "video_0000"
    target = directory / video_id
    partial = directory / f".partial-{video_id}"
    shutil.rmtree(partial, ignore_errors=True)
    partial.mkdir(parents=True)
    frame_bytes = width * height * 3
    count = 0
    try:
        while True:
            chunk = stream.read(frame_bytes)
            if not chunk:
                break
            if len(chunk) != frame_bytes:
                raise DatasetError(
                    f"truncated raw frame {count}: {len(chunk)} of {frame_bytes} bytes"
                )
            rgb = np.frombuffer(chunk, dtype=np.uint8).reshape(height, width, 3)
            write_png(partial / frame_name(count), rgb)
            count += 1
        if count == 0:
            raise DatasetError("raw stream contained no frames")
        shutil.rmtree(target, ignore_errors=True)
        os.replace(partial, target)
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise
    record = VideoRecord(video_id, target, count, fps)
    existing = []
    if (directory / MANIFEST).is_file():
        existing = [r for r in read_manifest(directory) if r.id != video_id]
    write_manifest(directory, existing + [record])
    logger.info("ingested %d frame(s) into %s", count, target)
    return record
