"""Student/teacher backbones, dynamics networks and the invariance loss in one module."""

from __future__ import annotations

import logging
from typing import Sequence

import torch
import torch.nn as nn

from .config import RunConfig
from .dynamics import Dynamics, GateUnit
from .encoder import Encoder, ParameterSets, init_teacher
from .objective import DINOHead, InvarianceLoss

logger = logging.getLogger(__name__)


class Backbone(nn.Module):
    """Encoder plus the optional projection head on its class token."""

    def __init__(self, cfg: RunConfig) -> None:
        super().__init__()
        inv = cfg.invariance
        self.encoder = Encoder(cfg.encoder)
        self.head: DINOHead | None = None
        if inv.enabled:
            self.head = DINOHead(
                cfg.encoder.embed_dim,
                inv.prototypes,
                hidden_dim=inv.head_hidden,
                bottleneck_dim=inv.head_bottleneck,
                nlayers=inv.head_layers,
            )

    def embed(self, crops: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Head outputs for each crop batch (crops may differ in resolution)."""
        if self.head is None:
            raise RuntimeError("backbone has no projection head")
        top = self.encoder.cfg.top_level
        return [self.head(self.encoder(crop).cls[top]) for crop in crops]


class MidwayNetwork(nn.Module):
    def __init__(self, cfg: RunConfig) -> None:
        super().__init__()
        self.cfg = cfg
        if cfg.invariance.enabled and not cfg.encoder.use_cls_token:
            raise ValueError("invariance heads need the class token")
        self.backbones = ParameterSets(Backbone(cfg), momentum=cfg.optim.momentum_teacher)
        init_teacher(self.backbones)
        self.dynamics = Dynamics(cfg.encoder, cfg.dynamics)
        self.invariance: InvarianceLoss | None = (
            InvarianceLoss(cfg.invariance, cfg.epochs) if cfg.invariance.enabled else None
        )

    @property
    def student(self) -> Backbone:
        return self.backbones.student

    @property
    def teacher(self) -> Backbone:
        return self.backbones.teacher

    def trainable_modules(self) -> dict[str, nn.Module]:
        return {"student": self.student, "dynamics": self.dynamics}

    def component_parameters(self) -> dict[str, int]:
        """Trainable parameter count per component, for the ablation audit."""
        counts = {
            "encoder": _count(self.student.encoder),
            "head": _count(self.student.head) if self.student.head is not None else 0,
            "midway": _count(self.dynamics.midway) if self.dynamics.midway is not None else 0,
            "backward": _count(self.dynamics.backward),
            "forward": 0,
            "gates": 0,
        }
        for predictor in self.dynamics.predictor.values():
            gates = sum(_count(m) for m in predictor.modules() if isinstance(m, GateUnit))
            counts["gates"] += gates
            counts["forward"] += _count(predictor) - gates
        return counts

    def component_manifest(self) -> dict[str, int]:
        """Per-level network counts implied by the configuration."""
        plan = self.dynamics.plan
        gated = max(self.cfg.dynamics.forward_blocks - 1, 0) if self.cfg.dynamics.gating else 0
        return {
            "midway": len(plan.midway_levels),
            "backward": len(plan.backward_levels),
            "forward": len(plan.predict_levels),
            "gates": gated * len(plan.predict_levels),
            "loss_levels": len(plan.loss_levels),
        }


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
