"""
Patch-tokenising ViT encoder with exported feature levels, plus the
student/teacher parameter pair and its EMA update.

Level ``l`` is the output of block ``l`` (1-based). There is no spatial
downsampling, so every exported level has the same token grid.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import NonFiniteInputError, ShapeError, StructureMismatchError
from .layers import Block, grid_position_embedding, init_weights

logger = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    """Token grids per exported level, (B, N, D) each; class token at the top level."""

    levels: dict[int, torch.Tensor]
    cls: dict[int, torch.Tensor] = field(default_factory=dict)
    grid: tuple[int, int] = (0, 0)

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid(
            {k: v.detach() for k, v in self.levels.items()},
            {k: v.detach() for k, v in self.cls.items()},
            self.grid,
        )


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.cfg = cfg
        dim = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim)) if cfg.use_cls_token else None
        self.pos_embed = grid_position_embedding(cfg.num_tokens, dim)
        self.cls_pos = nn.Parameter(torch.zeros(1, 1, dim)) if cfg.use_cls_token else None
        rates = torch.linspace(0, cfg.drop_path_rate, cfg.depth).tolist()
        self.blocks = nn.ModuleList(
            Block(dim, cfg.heads, mlp_ratio=cfg.mlp_ratio, drop_path=rates[i])
            for i in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.apply(init_weights)
        if self.cls_token is not None:
            nn.init.trunc_normal_(self.cls_token, std=0.02)

    def _pos_for_grid(self, grid: int) -> torch.Tensor:
        """Patch position embeddings, bicubically resized for non-native crop sizes."""
        native = self.cfg.grid_size
        if grid == native:
            return self.pos_embed
        dim = self.pos_embed.shape[-1]
        pos = self.pos_embed.reshape(1, native, native, dim).permute(0, 3, 1, 2)
        pos = F.interpolate(pos, size=(grid, grid), mode="bicubic", align_corners=False)
        return pos.permute(0, 2, 3, 1).reshape(1, grid * grid, dim)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        cfg = self.cfg
        x = self.patch_embed(image)
        grid = x.shape[-1]
        x = x.flatten(2).transpose(1, 2) + self._pos_for_grid(grid)
        offset = 0
        if self.cls_token is not None:
            cls = (self.cls_token + self.cls_pos).expand(x.shape[0], -1, -1)
            x = torch.cat([cls, x], dim=1)
            offset = 1

        exported = set(cfg.exported_levels)
        levels: dict[int, torch.Tensor] = {}
        cls_out: dict[int, torch.Tensor] = {}
        for index, block in enumerate(self.blocks[: cfg.top_level], start=1):
            x = block(x)
            if index in exported:
                levels[index] = x[:, offset:]
        if offset:
            cls_out[cfg.top_level] = self.norm(x[:, 0])
        return FeaturePyramid(levels, cls_out, (grid, grid))


def check_image(image: torch.Tensor, patch_size: int) -> None:
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) image batch, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h != w:
        raise ShapeError(f"image must be square, got {h}x{w}")
    if h % patch_size:
        raise ShapeError(f"image size {h} not divisible by patch size {patch_size}")


def encode(
    image: torch.Tensor,
    encoder: Encoder,
    cfg: EncoderConfig | None = None,
) -> FeaturePyramid:
    """
    Encode a normalised image batch into its feature pyramid.

    One grid per tap level plus the top level, each with (size / patch)^2 tokens.
    Pure function of *image* and the encoder's parameters.
    """
    cfg = cfg or encoder.cfg
    check_image(image, cfg.patch_size)
    if not torch.isfinite(image).all():
        raise NonFiniteInputError("image contains non-finite values")
    return encoder(image)


class ParameterSets(nn.Module):
    """Student parameters and their structurally identical EMA teacher."""

    def __init__(
        self,
        student: nn.Module,
        teacher: nn.Module | None = None,
        momentum: float = 0.996,
    ) -> None:
        super().__init__()
        self.student = student
        self.teacher = teacher if teacher is not None else copy.deepcopy(student)
        self.momentum = momentum
        self.teacher.requires_grad_(False)


def _paired_parameters(params: ParameterSets):
    student = list(params.student.named_parameters())
    teacher = list(params.teacher.named_parameters())
    for i in range(max(len(student), len(teacher))):
        if i >= len(student):
            raise StructureMismatchError(teacher[i][0], "missing on student side")
        if i >= len(teacher):
            raise StructureMismatchError(student[i][0], "missing on teacher side")
        (s_name, s), (t_name, t) = student[i], teacher[i]
        if s_name != t_name:
            raise StructureMismatchError(s_name, f"teacher has {t_name!r} at the same position")
        if s.shape != t.shape:
            raise StructureMismatchError(
                s_name, f"shape {tuple(s.shape)} vs teacher {tuple(t.shape)}"
            )
        yield s_name, s, t


def init_teacher(params: ParameterSets) -> ParameterSets:
    """Copy student into teacher bit-exactly and clear the teacher's gradient flags."""
    with torch.no_grad():
        for _, s, t in _paired_parameters(params):
            t.copy_(s)
    params.teacher.requires_grad_(False)
    return params


@torch.no_grad()
def ema_update(params: ParameterSets, momentum: float | None = None) -> ParameterSets:
    """``teacher <- momentum * teacher + (1 - momentum) * student`` for every parameter."""
    m = params.momentum if momentum is None else float(momentum)
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    pairs = list(_paired_parameters(params))
    for _, s, t in pairs:
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)
    return params
