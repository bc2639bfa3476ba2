"""
Frame-pair sampling and crops.

Each sample is two frames ``dt`` seconds apart from one video. The dense crop
uses one box for both frames; the invariance crops come from a smaller initial
box, also shared by both frames, inside which each frame draws its own global
and local views. Every random draw comes from a generator seeded by
``(seed, epoch, index)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from .config import AugmentConfig, RunConfig, SamplingConfig
from .errors import DatasetError, ShapeError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class CropBox:
    """Pixel box ``(x, y, w, h)`` inside a ``width`` x ``height`` frame."""

    x: int
    y: int
    w: int
    h: int
    width: int
    height: int

    @property
    def area_fraction(self) -> float:
        return (self.w * self.h) / float(self.width * self.height)

    @property
    def normalized(self) -> tuple[float, float, float, float]:
        return (
            self.x / self.width,
            self.y / self.height,
            self.w / self.width,
            self.h / self.height,
        )


def box_from_fraction(
    width: int,
    height: int,
    fraction: float,
    aspect: float,
) -> tuple[int, int]:
    """Integer (w, h) covering about *fraction* of the frame at aspect ``w / h``."""
    area = fraction * width * height
    w = int(round(math.sqrt(area * aspect)))
    h = int(round(math.sqrt(area / aspect)))
    return w, h


def sample_box(
    width: int,
    height: int,
    area_range: tuple[float, float],
    aspect_range: tuple[float, float],
    rng: np.random.Generator,
    *,
    attempts: int = 10,
) -> CropBox:
    """
    Random-resized-crop box whose area fraction lies in *area_range*.

    Falls back to a centred box of the mid-range area when no random draw fits.
    """
    lo, hi = area_range
    log_ratio = (math.log(aspect_range[0]), math.log(aspect_range[1]))
    for _ in range(attempts):
        fraction = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_ratio))
        w, h = box_from_fraction(width, height, fraction, aspect)
        if 0 < w <= width and 0 < h <= height and lo <= w * h / (width * height) <= hi:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return CropBox(x, y, w, h, width, height)

    target = 0.5 * (lo + hi) * width * height
    w = min(width, max(1, int(round(math.sqrt(target)))))
    h = min(height, max(1, int(round(target / w))))
    if not lo <= w * h / (width * height) <= hi:
        raise ShapeError(
            f"frame {width}x{height} too small for a crop with area fraction in [{lo}, {hi}]"
        )
    return CropBox((width - w) // 2, (height - h) // 2, w, h, width, height)


def to_tensor(frame: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float in [0, 1]."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) frame, got {frame.shape}")
    return torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1).float() / 255.0


def normalize(image: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=image.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=image.dtype).view(3, 1, 1)
    return (image - mean) / std


def crop_resize(image: torch.Tensor, box: CropBox, size: int) -> torch.Tensor:
    """Cut *box* out of a (3, H, W) image and resize it to ``size`` x ``size``."""
    patch = image[:, box.y:box.y + box.h, box.x:box.x + box.w]
    if patch.shape[-2:] == (size, size):
        return patch.clone()
    resized = F.interpolate(
        patch.unsqueeze(0),
        size=(size, size),
        mode="bilinear",
        align_corners=False,
        antialias=True,
    )
    return resized.squeeze(0)


def color_jitter(image: torch.Tensor, strength: float, rng: np.random.Generator) -> torch.Tensor:
    """Brightness, contrast and saturation scaled by factors in ``1 +- strength``."""
    b, c, s = (float(rng.uniform(1 - strength, 1 + strength)) for _ in range(3))
    image = image * b
    mean = image.mean()
    image = (image - mean) * c + mean
    gray = image.mean(dim=0, keepdim=True)
    image = (image - gray) * s + gray
    return image.clamp(0.0, 1.0)


def to_model_input(frame: np.ndarray, size: int) -> torch.Tensor:
    """Whole frame resized to ``size`` and normalised, (3, size, size)."""
    image = to_tensor(frame)
    h, w = image.shape[-2:]
    return normalize(crop_resize(image, CropBox(0, 0, w, h, w, h), size))


@dataclass
class FramePair:
    x_src: torch.Tensor
    x_tgt: torch.Tensor
    inv_src_global: list[torch.Tensor] = field(default_factory=list)
    inv_tgt_global: list[torch.Tensor] = field(default_factory=list)
    inv_src_local: list[torch.Tensor] = field(default_factory=list)
    inv_tgt_local: list[torch.Tensor] = field(default_factory=list)
    dt: float = 0.0
    crop_box: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    inv_box: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    meta: dict[str, Any] = field(default_factory=dict)


def _views(
    image: torch.Tensor,
    parent: CropBox,
    count: int,
    area: tuple[float, float],
    size: int,
    smp: SamplingConfig,
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> list[torch.Tensor]:
    region = image[:, parent.y:parent.y + parent.h, parent.x:parent.x + parent.w]
    views = []
    for _ in range(count):
        box = sample_box(parent.w, parent.h, area, smp.aspect_range, rng)
        view = crop_resize(region, box, size)
        if aug.inv_flip and rng.random() < 0.5:
            view = view.flip(-1)
        if aug.inv_color_jitter:
            view = color_jitter(view, aug.jitter_strength, rng)
        views.append(normalize(view))
    return views


def crop_pair(
    frame_src: np.ndarray,
    frame_tgt: np.ndarray,
    cfg: RunConfig,
    rng: np.random.Generator,
    *,
    dt: float = 0.0,
    with_invariance: bool = True,
) -> FramePair:
    """Dense same-location crop of both frames plus the per-frame invariance views."""
    if frame_src.shape != frame_tgt.shape:
        raise ShapeError(f"frames differ in shape: {frame_src.shape} vs {frame_tgt.shape}")
    smp, aug, inv = cfg.sampling, cfg.augment, cfg.invariance
    src, tgt = to_tensor(frame_src), to_tensor(frame_tgt)
    height, width = src.shape[-2:]

    box = sample_box(width, height, smp.dense_area, smp.aspect_range, rng)
    x_src = crop_resize(src, box, smp.output_resolution)
    x_tgt = crop_resize(tgt, box, smp.output_resolution)
    if aug.dense_flip and rng.random() < 0.5:
        x_src, x_tgt = x_src.flip(-1), x_tgt.flip(-1)
    if aug.dense_color_jitter:
        state = rng.bit_generator.state
        x_src = color_jitter(x_src, aug.jitter_strength, rng)
        rng.bit_generator.state = state
        x_tgt = color_jitter(x_tgt, aug.jitter_strength, rng)
    pair = FramePair(normalize(x_src), normalize(x_tgt), dt=dt, crop_box=box.normalized)

    if with_invariance and inv.enabled:
        initial = sample_box(width, height, smp.inv_area, smp.aspect_range, rng)
        pair.inv_box = initial.normalized
        for image, glob, loc in (
            (src, pair.inv_src_global, pair.inv_src_local),
            (tgt, pair.inv_tgt_global, pair.inv_tgt_local),
        ):
            glob.extend(
                _views(image, initial, inv.num_global, smp.global_area,
                       smp.output_resolution, smp, aug, rng)
            )
            loc.extend(
                _views(image, initial, inv.num_local, smp.local_area,
                       smp.local_resolution, smp, aug, rng)
            )
    return pair


def frame_gap(dt: float, fps: float) -> int:
    return int(round(dt * fps))


def sample_frame_pair(
    video,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, float, tuple[int, int]]:
    """
    Two frames ``dt`` apart, ``dt`` uniform in ``dt_range`` rounded to whole
    frames, with a uniform anchor. Returns frames, realised dt and indices.
    """
    longest = frame_gap(cfg.dt_range[1], video.fps)
    if len(video) - 1 < longest:
        raise DatasetError(
            f"video with {len(video)} frames is shorter than the largest gap of {longest} frames"
        )
    gap = frame_gap(float(rng.uniform(*cfg.dt_range)), video.fps)
    t0 = int(rng.integers(0, len(video) - gap))
    t1 = t0 + gap
    return video.frame(t0), video.frame(t1), gap / video.fps, (t0, t1)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


class PairDataset(Dataset):
    """
    ``repeats_per_video`` samples per video per epoch; sample *i* reads video
    ``i // R``. The crops of a sample depend only on ``(seed, epoch, i)``.
    """

    def __init__(self, videos: Sequence, cfg: RunConfig, *, seed: int | None = None) -> None:
        self.videos = list(videos)
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.repeats = cfg.sampling.repeats_per_video
        self.epoch = 0
        longest = cfg.sampling.dt_range[1]
        short = [v for v in self.videos if len(v) - 1 < frame_gap(longest, v.fps)]
        if short:
            raise DatasetError(f"{len(short)} video(s) too short for dt up to {longest}s")

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.videos) * self.repeats

    def __getitem__(self, index: int) -> FramePair:
        rng = sample_rng(self.seed, self.epoch, index)
        video = self.videos[index // self.repeats]
        a, b, dt, (t0, t1) = sample_frame_pair(video, self.cfg.sampling, rng)
        pair = crop_pair(a, b, self.cfg, rng, dt=dt)
        pair.meta = {"video": index // self.repeats, "t0": t0, "t1": t1}
        return pair


@dataclass
class PairBatch:
    src: torch.Tensor
    tgt: torch.Tensor
    global_crops: tuple[list[torch.Tensor], list[torch.Tensor]] = field(
        default_factory=lambda: ([], [])
    )
    local_crops: tuple[list[torch.Tensor], list[torch.Tensor]] = field(
        default_factory=lambda: ([], [])
    )
    dt: torch.Tensor | None = None
    meta: list[dict[str, Any]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.src.shape[0]

    def to(self, device: torch.device | str, dtype: torch.dtype | None = None) -> "PairBatch":
        def move(t: torch.Tensor) -> torch.Tensor:
            return t.to(device=device, dtype=dtype) if dtype is not None else t.to(device)

        return PairBatch(
            move(self.src),
            move(self.tgt),
            ([move(t) for t in self.global_crops[0]], [move(t) for t in self.global_crops[1]]),
            ([move(t) for t in self.local_crops[0]], [move(t) for t in self.local_crops[1]]),
            self.dt,
            self.meta,
        )


def collate_pairs(pairs: Sequence[FramePair]) -> PairBatch:
    """Stack pairs; invariance views are stacked view by view."""

    def stack_views(attr: str) -> list[torch.Tensor]:
        views = [getattr(p, attr) for p in pairs]
        return [torch.stack([v[i] for v in views]) for i in range(len(views[0]))]

    return PairBatch(
        src=torch.stack([p.x_src for p in pairs]),
        tgt=torch.stack([p.x_tgt for p in pairs]),
        global_crops=(stack_views("inv_src_global"), stack_views("inv_tgt_global")),
        local_crops=(stack_views("inv_src_local"), stack_views("inv_tgt_local")),
        dt=torch.tensor([p.dt for p in pairs]),
        meta=[p.meta for p in pairs],
    )
