"""
Training objective: the dense forward-prediction loss over the hierarchy and
the cross-frame invariance loss on projection heads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import InvarianceConfig, RunConfig
from .errors import DegenerateFeatureError, NonFiniteLossError, ShapeError

logger = logging.getLogger(__name__)


def normalize_tokens(x: torch.Tensor, eps: float | None = None) -> torch.Tensor:
    """L2-normalise each token along channels; without *eps* a zero token is an error."""
    norm = x.norm(dim=-1, keepdim=True)
    if eps is None:
        if bool((norm == 0).any()):
            raise DegenerateFeatureError("zero-norm token cannot be normalised")
        return x / norm
    return x / (norm + eps)


def dense_forward_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    *,
    eps: float | None = None,
) -> torch.Tensor:
    """
    Mean over tokens of ``||pred/|pred| - target/|target|||^2``, in [0, 4].

    *target* is treated as a constant. ``eps=None`` is exact mode (zero-norm
    tokens raise); training passes a small epsilon added to the norms.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    p = normalize_tokens(pred, eps)
    t = normalize_tokens(target.detach(), eps)
    return (p - t).pow(2).sum(dim=-1).mean()


@dataclass(frozen=True)
class LevelLoss:
    level: int
    value: float


class DINOHead(nn.Module):
    """MLP to an L2-normalised bottleneck, then a weight-normalised prototype layer."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        *,
        hidden_dim: int = 2048,
        bottleneck_dim: int = 256,
        nlayers: int = 3,
    ) -> None:
        super().__init__()
        nlayers = max(nlayers, 1)
        if nlayers == 1:
            self.mlp: nn.Module = nn.Linear(in_dim, bottleneck_dim)
        else:
            layers: list[nn.Module] = [nn.Linear(in_dim, hidden_dim), nn.GELU()]
            for _ in range(nlayers - 2):
                layers += [nn.Linear(hidden_dim, hidden_dim), nn.GELU()]
            layers.append(nn.Linear(hidden_dim, bottleneck_dim))
            self.mlp = nn.Sequential(*layers)
        self.last_layer = nn.Linear(bottleneck_dim, out_dim, bias=False)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.normalize(self.mlp(x), dim=-1, p=2)
        return F.linear(x, F.normalize(self.last_layer.weight, dim=1))


def teacher_temp_schedule(cfg: InvarianceConfig, epochs: int) -> np.ndarray:
    """Linear warmup from the start temperature, then constant."""
    warmup = min(cfg.teacher_temp_warmup_epochs, epochs)
    return np.concatenate(
        (
            np.linspace(cfg.teacher_temp_start, cfg.teacher_temp_end, warmup),
            np.ones(epochs - warmup) * cfg.teacher_temp_end,
        )
    )


class InvarianceLoss(nn.Module):
    """
    Cross-entropy between the centred, sharpened teacher distribution on the
    global crops of one frame and the student distribution on every crop of
    the other frame, averaged over all pairs of both frame orderings.
    """

    def __init__(self, cfg: InvarianceConfig, epochs: int) -> None:
        super().__init__()
        self.cfg = cfg
        self.student_temp = cfg.student_temp
        self.center_momentum = cfg.center_momentum
        self.register_buffer("center", torch.zeros(1, cfg.prototypes))
        self.schedule = teacher_temp_schedule(cfg, max(epochs, 1))

    def teacher_temp(self, epoch: int) -> float:
        return float(self.schedule[min(max(epoch, 0), len(self.schedule) - 1)])

    def forward(
        self,
        student: Sequence[Sequence[torch.Tensor]],
        teacher: Sequence[Sequence[torch.Tensor]],
        *,
        epoch: int = 0,
        update_center: bool = True,
    ) -> torch.Tensor:
        """
        *student[f]* holds head outputs for every crop of frame *f*,
        *teacher[f]* those for the global crops of frame *f*.
        """
        if len(student) != 2 or len(teacher) != 2:
            raise ShapeError("invariance loss needs crops from exactly two frames")
        if any(len(t) < 1 for t in teacher):
            raise ShapeError("invariance loss needs at least one global crop per frame")
        temp = self.teacher_temp(epoch)
        total = 0.0
        terms = 0
        for frame in (0, 1):
            other = 1 - frame
            for t_out in teacher[frame]:
                q = F.softmax((t_out - self.center) / temp, dim=-1).detach()
                for s_out in student[other]:
                    loss = torch.sum(-q * F.log_softmax(s_out / self.student_temp, dim=-1), dim=-1)
                    total = total + loss.mean()
                    terms += 1
        if update_center:
            self.update_center([t for frame in teacher for t in frame])
        return total / max(terms, 1)

    @torch.no_grad()
    def update_center(self, teacher_output: Sequence[torch.Tensor]) -> None:
        """``center <- m * center + (1 - m) * batch mean``."""
        batch_center = torch.cat(list(teacher_output), dim=0).mean(dim=0, keepdim=True)
        m = self.center_momentum
        self.center.mul_(m).add_(batch_center.to(self.center.dtype), alpha=1.0 - m)


@dataclass
class ObjectiveReport:
    level_losses: dict[int, torch.Tensor] = field(default_factory=dict)
    dyn: torch.Tensor | None = None
    inv: torch.Tensor | None = None
    total: torch.Tensor | None = None

    def levels(self) -> list[LevelLoss]:
        return [LevelLoss(lvl, float(v.detach())) for lvl, v in sorted(self.level_losses.items())]

    def scalars(self) -> dict[str, float]:
        out = {f"dyn_l{lvl}": float(v.detach()) for lvl, v in sorted(self.level_losses.items())}
        out["dyn"] = float(self.dyn.detach()) if self.dyn is not None else 0.0
        out["inv"] = float(self.inv.detach()) if self.inv is not None else 0.0
        out["total"] = float(self.total.detach()) if self.total is not None else 0.0
        return out


def _check_finite(term: str, value: torch.Tensor) -> None:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(term, v)


def aggregate_levels(losses: Sequence[torch.Tensor], reduction: str) -> torch.Tensor:
    stacked = torch.stack(list(losses))
    return stacked.sum() if reduction == "sum" else stacked.mean()


def compute_objective(
    model,
    batch,
    cfg: RunConfig,
    *,
    epoch: int = 0,
    eps: float | None = None,
    update_center: bool = True,
) -> ObjectiveReport:
    """
    Run the hierarchy over one batch of frame pairs and return every loss term.

    Source features come from the student, target features from the teacher
    without gradient. ``total = dyn + inv``; either term is absent when its
    component is switched off.
    """
    report = ObjectiveReport()
    terms: list[torch.Tensor] = []

    if model.dynamics.enabled:
        z_src = model.student.encoder(batch.src)
        with torch.no_grad():
            z_tgt = model.teacher.encoder(batch.tgt)
        out = model.dynamics.hierarchy(z_src.levels, z_tgt.levels)
        for level in model.dynamics.plan.loss_levels:
            loss = dense_forward_loss(out.predictions[level], z_tgt[level], eps=eps)
            _check_finite(f"dense loss at level {level}", loss)
            report.level_losses[level] = loss
        report.dyn = aggregate_levels(
            list(report.level_losses.values()), cfg.objective.level_reduction
        )
        terms.append(report.dyn)

    if model.invariance is not None:
        student_out = [
            model.student.embed(list(batch.global_crops[f]) + list(batch.local_crops[f]))
            for f in (0, 1)
        ]
        with torch.no_grad():
            teacher_out = [model.teacher.embed(list(batch.global_crops[f])) for f in (0, 1)]
        report.inv = model.invariance(
            student_out, teacher_out, epoch=epoch, update_center=update_center
        )
        _check_finite("invariance loss", report.inv)
        terms.append(report.inv)

    if not terms:
        raise ShapeError("no loss terms: both dynamics and invariance are disabled")
    report.total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return report
