"""
Forwarded feature perturbation.

A random vector is attached as the tangent of one source token on the tap
levels and pushed through the dynamics with forward-mode AD; the cosine between
that vector and each predicted token's tangent gives a correspondence heatmap.
Tracking chains heatmaps over a video.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from torch.func import jvp

from ._io import write_matrix, write_png
from .config import AnalysisConfig
from .errors import ShapeError
from .sampling import to_model_input

logger = logging.getLogger(__name__)


@dataclass
class PerturbationHeatmap:
    scores: np.ndarray  # (grid_h, grid_w), averaged cosine
    source_location: tuple[int, int]
    k: int
    level: int
    zero_tangent: bool = False
    tangent_norms: dict[int, float] = field(default_factory=dict)

    @property
    def peak(self) -> tuple[int, int]:
        flat = int(np.argmax(self.scores))
        return divmod(flat, self.scores.shape[1])


@dataclass
class Track:
    locations: list[tuple[int, int]] = field(default_factory=list)
    scores: list[tuple[float, float]] = field(default_factory=list)


def parse_location(text: str) -> tuple[int, int]:
    """``"row,col"`` -> (row, col)."""
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"location must be 'row,col', got {text!r}")
    return int(parts[0]), int(parts[1])


def heatmap_level(model, cfg: AnalysisConfig) -> int:
    plan = model.dynamics.plan
    if not model.dynamics.enabled:
        raise ShapeError("perturbation needs the dynamics networks (latent_dynamics is off)")
    level = cfg.heatmap_level or min(plan.predict_levels)
    if level not in plan.predict_levels:
        raise ShapeError(f"no prediction at level {level}; predicted levels {plan.predict_levels}")
    return level


def perturb_forward(
    model,
    x_src: torch.Tensor,
    x_tgt: torch.Tensor,
    location: tuple[int, int],
    cfg: AnalysisConfig,
    *,
    seed: int = 0,
) -> PerturbationHeatmap:
    """
    Heatmap of where a perturbation at *location* in the source lands in the
    prediction, averaged over ``cfg.k`` random tangents.

    *x_src*, *x_tgt* are single normalised images, (1, 3, H, W) or (3, H, W).
    Source features come from the student, target features from the teacher;
    the tangent also flows through the motion latents.
    """
    if x_src.dim() == 3:
        x_src, x_tgt = x_src.unsqueeze(0), x_tgt.unsqueeze(0)
    model.eval()
    level = heatmap_level(model, cfg)
    taps = tuple(sorted(model.cfg.encoder.tap_levels))
    levels = tuple(cfg.levels) or taps
    with torch.no_grad():
        z_src = model.student.encoder(x_src)
        z_tgt = model.teacher.encoder(x_tgt)
    gh, gw = z_src.grid
    row, col = location
    if not (0 <= row < gh and 0 <= col < gw):
        raise ShapeError(f"source location {location} outside the {gh}x{gw} token grid")
    index = row * gw + col
    src_levels = dict(z_src.levels)
    tgt_levels = dict(z_tgt.levels)
    pred_order = sorted(model.dynamics.plan.predict_levels)

    def predict(*perturbed: torch.Tensor) -> tuple[torch.Tensor, ...]:
        feats = dict(src_levels)
        feats.update(zip(levels, perturbed))
        out = model.dynamics.hierarchy(feats, tgt_levels)
        return tuple(out.predictions[lvl] for lvl in pred_order)

    ref = src_levels[levels[0]]
    dim = ref.shape[-1]
    gen = torch.Generator().manual_seed(seed)
    scores = torch.zeros(gh * gw, dtype=torch.float64)
    norms = {lvl: 0.0 for lvl in pred_order}
    zero_tangent = False
    primals = tuple(src_levels[lvl] for lvl in levels)
    for _ in range(cfg.k):
        r = torch.randn(dim, generator=gen, dtype=torch.float64) * cfg.tangent_scale
        r = r.to(device=ref.device, dtype=ref.dtype)
        tangents = []
        for lvl in levels:
            t = torch.zeros_like(src_levels[lvl])
            t[0, index] = r
            tangents.append(t)
        _, out_tangents = jvp(predict, primals, tuple(tangents))
        for lvl, tan in zip(pred_order, out_tangents):
            norms[lvl] += float(tan.norm()) / cfg.k
        tan = out_tangents[pred_order.index(level)][0]
        token_norm = tan.norm(dim=-1)
        if bool((token_norm == 0).all()):
            zero_tangent = True
        cos = (tan @ r) / (token_norm * r.norm()).clamp_min(torch.finfo(tan.dtype).tiny)
        cos = torch.where(token_norm > 0, cos, torch.zeros_like(cos))
        scores += cos.detach().to(torch.float64).cpu()
    scores /= cfg.k
    if zero_tangent:
        logger.warning("perturbation at %s produced an all-zero output tangent", location)
    return PerturbationHeatmap(
        scores=scores.clamp(-1.0, 1.0).numpy().reshape(gh, gw),
        source_location=(row, col),
        k=cfg.k,
        level=level,
        zero_tangent=zero_tangent,
        tangent_norms=norms,
    )


def _top_level_tokens(model, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        feats = model.teacher.encoder(x.unsqueeze(0) if x.dim() == 3 else x)
    return feats[model.cfg.encoder.top_level][0]


def top_candidates(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the *k* highest scores; equal scores keep the lower index first."""
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    return [int(i) for i in order[: min(k, flat.size)]]


def track(
    model,
    frames: Sequence[np.ndarray],
    init_location: tuple[int, int],
    cfg: AnalysisConfig,
    *,
    seed: int = 0,
) -> Track:
    """
    Follow *init_location* through *frames*: per step, take the top-k heatmap
    locations and keep the one whose teacher top-level feature is most similar
    to the reference feature.
    """
    if len(frames) < 2:
        raise ShapeError("tracking needs at least two frames")
    size = model.cfg.encoder.image_size
    inputs = [to_model_input(f, size).unsqueeze(0).to(_param_dtype(model)) for f in frames]
    feats = [_top_level_tokens(model, x) for x in inputs]
    gw = int(round(feats[0].shape[0] ** 0.5))
    result = Track(locations=[init_location])
    cur = init_location
    init_feat = feats[0][init_location[0] * gw + init_location[1]]
    for t in range(len(frames) - 1):
        heat = perturb_forward(model, inputs[t], inputs[t + 1], cur, cfg, seed=seed + t)
        candidates = top_candidates(heat.scores, cfg.top_k)
        ref = feats[t][cur[0] * gw + cur[1]] if cfg.reanchor else init_feat
        sims = F.cosine_similarity(feats[t + 1][candidates], ref.unsqueeze(0), dim=-1)
        sims = sims.detach().cpu().numpy()
        best = max(range(len(candidates)), key=lambda i: (sims[i], -candidates[i]))
        chosen = candidates[best]
        cur = divmod(chosen, gw)
        result.locations.append(cur)
        result.scores.append((float(heat.scores.reshape(-1)[chosen]), float(sims[best])))
    return result


def _param_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def heatmap_overlay(
    scores: np.ndarray,
    frame: np.ndarray,
    source_location: tuple[int, int] | None = None,
    *,
    alpha: float = 0.6,
    cmap: str = "viridis",
) -> np.ndarray:
    """Blend the bilinearly upsampled heatmap onto *frame*; scores map over [-1, 1]."""
    h, w = frame.shape[:2]
    gh, gw = scores.shape
    if h % gh or w % gw:
        raise ShapeError(f"heatmap grid {gh}x{gw} does not tile a {h}x{w} frame")
    up = F.interpolate(
        torch.as_tensor(scores, dtype=torch.float64)[None, None],
        size=(h, w),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    colors = colormaps[cmap]((np.clip(up, -1.0, 1.0) + 1.0) / 2.0)[..., :3]
    blended = (1.0 - alpha) * frame.astype(np.float64) / 255.0 + alpha * colors
    out = np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)
    if source_location is not None:
        ph, pw = h // gh, w // gw
        r0, c0 = source_location[0] * ph, source_location[1] * pw
        green = np.array([0, 255, 0], dtype=np.uint8)
        out[r0, c0:c0 + pw] = green
        out[r0 + ph - 1, c0:c0 + pw] = green
        out[r0:r0 + ph, c0] = green
        out[r0:r0 + ph, c0 + pw - 1] = green
    return out


def render_heatmap(
    heatmap: PerturbationHeatmap,
    frame: np.ndarray,
    path: str | Path,
    *,
    mark_source: bool = True,
) -> Path:
    """Write the overlay as an 8-bit RGB PNG."""
    overlay = heatmap_overlay(
        heatmap.scores, frame, heatmap.source_location if mark_source else None
    )
    return write_png(path, overlay)


def export_heatmap(heatmap: PerturbationHeatmap, path: str | Path) -> Path:
    """Scores as a float32 binary matrix."""
    return write_matrix(path, heatmap.scores.astype(np.float32))
