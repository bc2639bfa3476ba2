"""
Linear probes on frozen features of a sprite dataset.

Two readouts: the 4-way shared translation direction from the mean motion
latent, and the sprite shape class from encoder tokens pooled inside each
sprite's mask. Both are fit with closed-form ridge regression on one-hot
targets and scored on held-out videos.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import FrameDirVideo
from .errors import DatasetError
from .sampling import sample_frame_pair, to_model_input
from .sprites import DIRECTIONS, SHAPES

logger = logging.getLogger(__name__)

TASKS = ("direction", "shape")
# held-out direction accuracy a trained model should beat; below it the run is degraded
DIRECTION_TARGET = 0.40
_CHUNK = 32


@dataclass(frozen=True)
class ProbeReport:
    task: str
    accuracy: float
    chance: float
    feature_source: str
    n_train: int
    n_test: int
    verdict: str = "ok"

    def as_dict(self) -> dict:
        return asdict(self)


def ridge_fit(features: np.ndarray, labels: np.ndarray, classes: int, ridge: float) -> np.ndarray:
    """Weights (D + 1, classes) of ridge regression onto one-hot *labels*; last row is the bias."""
    x = np.hstack([features, np.ones((features.shape[0], 1))])
    y = np.eye(classes)[labels]
    reg = ridge * np.eye(x.shape[1])
    reg[-1, -1] = 0.0
    return np.linalg.solve(x.T @ x + reg, x.T @ y)


def ridge_predict(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    x = np.hstack([features, np.ones((features.shape[0], 1))])
    return np.argmax(x @ weights, axis=1)


def split_videos(count: int, holdout_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic (train, test) video indices; both sides non-empty."""
    if count < 2:
        raise DatasetError("a held-out split needs at least two videos")
    order = np.random.default_rng([seed, 7]).permutation(count)
    n_test = min(max(int(round(count * holdout_fraction)), 1), count - 1)
    return sorted(int(i) for i in order[n_test:]), sorted(int(i) for i in order[:n_test])


def dominant_direction(meta: dict) -> int:
    """Shared direction label, or the most common sprite direction when mixed."""
    if meta.get("direction", -1) >= 0:
        return int(meta["direction"])
    votes = np.zeros(len(DIRECTIONS), dtype=np.int64)
    for sprite in meta["states"][0]:
        vx, vy = sprite["velocity"]
        step = (int(np.sign(vx)), int(np.sign(vy)))
        if step in DIRECTIONS:
            votes[DIRECTIONS.index(step)] += 1
    return int(np.argmax(votes))


def _require_ground_truth(videos: Sequence[FrameDirVideo]) -> None:
    missing = [v.record.id for v in videos if not v.has_ground_truth()]
    if missing:
        raise DatasetError(f"no ground truth for {len(missing)} video(s), e.g. {missing[0]}")


def _model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def motion_features(model, src: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
    """Mean over tokens of the final motion latents, (B, midway_dim)."""
    if not model.dynamics.enabled:
        raise DatasetError("motion probe needs latent dynamics in the checkpoint")
    z_src = model.student.encoder(src)
    z_tgt = model.teacher.encoder(tgt)
    out = model.dynamics.hierarchy(dict(z_src.levels), dict(z_tgt.levels))
    last = min(out.motion)
    return out.motion[last].mean(dim=1)


def direction_dataset(
    model,
    videos: Sequence[FrameDirVideo],
    indices: Sequence[int],
    pairs: int,
    cfg,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    size = model.cfg.encoder.image_size
    dtype = _model_dtype(model)
    feats, labels = [], []
    srcs, tgts = [], []

    def flush() -> None:
        if srcs:
            out = motion_features(model, torch.stack(srcs).to(dtype), torch.stack(tgts).to(dtype))
            feats.append(out.double().cpu().numpy())
            srcs.clear()
            tgts.clear()

    for n in range(pairs):
        video = videos[indices[n % len(indices)]]
        rng = np.random.default_rng([seed, n])
        a, b, _, _ = sample_frame_pair(video, cfg.sampling, rng)
        srcs.append(to_model_input(a, size))
        tgts.append(to_model_input(b, size))
        labels.append(dominant_direction(video.meta()))
        if len(srcs) == _CHUNK:
            flush()
    flush()
    return np.concatenate(feats), np.asarray(labels, dtype=np.int64)


@torch.no_grad()
def sprite_features(model, frame: np.ndarray, seg: np.ndarray) -> dict[int, np.ndarray]:
    """Top-level teacher tokens pooled per visible sprite, weighted by mask coverage."""
    enc = model.cfg.encoder
    x = to_model_input(frame, enc.image_size).unsqueeze(0).to(_model_dtype(model))
    tokens = model.teacher.encoder(x)[enc.top_level][0].double()
    grid = enc.grid_size
    pooled = {}
    for sprite in np.unique(seg):
        if sprite == 0:
            continue
        mask = torch.as_tensor(seg == sprite, dtype=torch.float64)[None, None]
        weights = F.adaptive_avg_pool2d(mask, (grid, grid)).reshape(-1)
        total = float(weights.sum())
        if total > 0.0:
            pooled[int(sprite)] = ((weights[:, None] * tokens).sum(0) / total).cpu().numpy()
    return pooled


def shape_dataset(
    model,
    videos: Sequence[FrameDirVideo],
    indices: Sequence[int],
    pairs: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    feats, labels = [], []
    for n in range(pairs):
        video = videos[indices[n % len(indices)]]
        t = int(np.random.default_rng([seed, n]).integers(len(video)))
        states = video.meta()["states"][t]
        for sprite, feature in sprite_features(model, video.frame(t), video.seg(t)).items():
            feats.append(feature)
            labels.append(SHAPES.index(states[sprite - 1]["shape"]))
    if not feats:
        raise DatasetError("no visible sprites to probe")
    return np.stack(feats), np.asarray(labels, dtype=np.int64)


def run_probe(
    model,
    videos: Sequence[FrameDirVideo],
    task: str,
    *,
    seed: int = 0,
    shuffle_labels: bool = False,
) -> ProbeReport:
    """Fit on training videos, report accuracy on held-out videos."""
    if task not in TASKS:
        raise ValueError(f"unknown probe task {task!r} (choose from {', '.join(TASKS)})")
    _require_ground_truth(videos)
    cfg = model.cfg
    model.eval()
    train_idx, test_idx = split_videos(len(videos), cfg.probe.holdout_fraction, seed)
    n_test_pairs = max(int(round(cfg.probe.pairs * cfg.probe.holdout_fraction)), 1)
    n_train_pairs = max(cfg.probe.pairs - n_test_pairs, 1)
    if task == "direction":
        classes, source = len(DIRECTIONS), "motion latents"
        x_train, y_train = direction_dataset(model, videos, train_idx, n_train_pairs, cfg, seed)
        x_test, y_test = direction_dataset(model, videos, test_idx, n_test_pairs, cfg, seed + 1)
    else:
        classes, source = len(SHAPES), "encoder tokens"
        x_train, y_train = shape_dataset(model, videos, train_idx, n_train_pairs, seed)
        x_test, y_test = shape_dataset(model, videos, test_idx, n_test_pairs, seed + 1)

    if shuffle_labels:
        y_train = np.random.default_rng([seed, 11]).permutation(y_train)
    mean = x_train.mean(axis=0, keepdims=True)
    weights = ridge_fit(x_train - mean, y_train, classes, cfg.probe.ridge)
    predicted = ridge_predict(weights, x_test - mean)
    accuracy = float(np.mean(predicted == y_test))
    logger.info("%s probe: accuracy %.3f over %d held-out samples", task, accuracy, len(y_test))
    verdict = "degraded" if task == "direction" and accuracy <= DIRECTION_TARGET else "ok"
    return ProbeReport(
        task, accuracy, 1.0 / classes, source, len(y_train), len(y_test), verdict
    )
