"""
Dynamics networks: midway inverse dynamics, backward refinement, gated forward
prediction, and the top-down walk that ties them to the encoder levels.

Parameter namespaces are ``midway.*``, ``backward.*`` and ``forward.*``; each
per-level network lives under ``levels.<level>``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from timm.layers import Mlp

from .config import DynamicsConfig, EncoderConfig
from .errors import ShapeError
from .layers import Block, CrossBlock, grid_position_embedding, init_weights, zero_linear_

logger = logging.getLogger(__name__)


class MidwayInverse(nn.Module):
    """
    Infers motion latents between a source and a target token grid.

    Input sequence is ``[motion ‖ source ‖ target]`` with segment embeddings;
    the output is read at the motion positions and added to the incoming latents.
    """

    def __init__(self, embed_dim: int, num_tokens: int, cfg: DynamicsConfig) -> None:
        super().__init__()
        dim = cfg.midway_dim
        self.num_motion_tokens = cfg.num_motion_tokens
        self.motion_in = nn.Linear(dim, dim)
        self.src_in = nn.Linear(embed_dim, dim)
        self.tgt_in = nn.Linear(embed_dim, dim)
        self.segment = nn.Parameter(torch.zeros(3, dim))
        self.pos_embed = grid_position_embedding(num_tokens, dim)
        self.blocks = nn.ModuleList(Block(dim, cfg.midway_heads) for _ in range(cfg.midway_blocks))
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.out_proj = nn.Linear(dim, dim)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.segment, std=0.02)

    def readout(self, m_prev: torch.Tensor, src: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        """Raw transformer read-out at the motion positions, before the residual."""
        if src.shape != tgt.shape:
            raise ShapeError(
                f"midway source {tuple(src.shape)} and target {tuple(tgt.shape)} differ"
            )
        if m_prev.dim() != 3 or m_prev.shape[1] != self.num_motion_tokens:
            raise ShapeError(
                f"expected ({self.num_motion_tokens}) motion tokens, got {tuple(m_prev.shape)}"
            )
        if src.shape[1] != self.pos_embed.shape[1]:
            raise ShapeError(f"midway expects {self.pos_embed.shape[1]} tokens, got {src.shape[1]}")
        k = self.num_motion_tokens
        x = torch.cat(
            [
                self.motion_in(m_prev) + self.segment[0],
                self.src_in(src) + self.pos_embed + self.segment[1],
                self.tgt_in(tgt) + self.pos_embed + self.segment[2],
            ],
            dim=1,
        )
        for block in self.blocks:
            x = block(x)
        return self.out_proj(self.norm(x[:, :k]))

    def forward(self, m_prev: torch.Tensor, src: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        return self.readout(m_prev, src, tgt) + m_prev

    def zero_output_(self) -> None:
        zero_linear_(self.out_proj)


class MidwayPath(nn.Module):
    """Learnable initial motion latents plus one inverse-dynamics network per level."""

    def __init__(
        self,
        levels: list[int],
        embed_dim: int,
        num_tokens: int,
        cfg: DynamicsConfig,
    ) -> None:
        super().__init__()
        # zeros at init, trained afterwards
        self.init = nn.Parameter(torch.zeros(cfg.num_motion_tokens, cfg.midway_dim))
        self.levels = nn.ModuleDict(
            {str(level): MidwayInverse(embed_dim, num_tokens, cfg) for level in levels}
        )

    def initial(self, batch: int) -> torch.Tensor:
        return self.init.unsqueeze(0).expand(batch, -1, -1)


class BackwardRefiner(nn.Module):
    """Lateral features query the upper level's backward features by cross-attention."""

    def __init__(
        self,
        dim: int,
        heads: int,
        num_tokens: int,
        *,
        blocks: int = 1,
        kv_pos: bool = True,
    ) -> None:
        super().__init__()
        self.num_tokens = num_tokens
        self.kv_pos = grid_position_embedding(num_tokens, dim) if kv_pos else None
        self.blocks = nn.ModuleList(CrossBlock(dim, heads) for _ in range(blocks))
        self.apply(init_weights)

    def forward(self, z: torch.Tensor, v_upper: torch.Tensor | None) -> torch.Tensor:
        if v_upper is None:
            raise ShapeError("backward refinement needs the upper level's backward features")
        if v_upper.shape != z.shape:
            raise ShapeError(
                f"lateral features {tuple(z.shape)} and upper features "
                f"{tuple(v_upper.shape)} differ"
            )
        context = v_upper if self.kv_pos is None else v_upper + self.kv_pos
        x = z
        for block in self.blocks:
            x = block(x, context)
        return x

    def zero_residual_branches_(self) -> None:
        for block in self.blocks:
            block.zero_residual_branches_()


class GateUnit(nn.Module):
    """Elementwise residual gate ``sigmoid(mlp(x) + bias)``, values in (0, 1)."""

    def __init__(self, dim: int, bias: float = 4.0) -> None:
        super().__init__()
        self.bias = bias
        self.mlp = Mlp(in_features=dim, hidden_features=dim, act_layer=nn.GELU)
        self.mlp.apply(init_weights)
        zero_linear_(self.mlp.fc2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(x) + self.bias)


class GatedBlock(Block):
    """
    Pre-norm block whose attention residual is scaled by a learned gate on
    masked tokens: ``h = g(x) * x + attn(norm(x))``. Unmasked tokens keep the
    plain residual; the feed-forward sublayer is unchanged.
    """

    def __init__(self, dim: int, heads: int, *, gate_bias: float = 4.0, **kwargs) -> None:
        super().__init__(dim, heads, **kwargs)
        self.gate = GateUnit(dim, gate_bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        residual = x
        if mask is not None:
            residual = torch.where(mask.unsqueeze(-1), self.gate(x) * x, x)
        x = residual + self.drop_path(self.attn(self.norm1(x)))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


def gated_block(block: GatedBlock, x: torch.Tensor, gate_mask: torch.Tensor) -> torch.Tensor:
    """Run *block* over *x* gating the tokens where *gate_mask* is set."""
    if gate_mask.shape != x.shape[:-1] and gate_mask.shape != x.shape[1:-1]:
        raise ShapeError(f"gate mask {tuple(gate_mask.shape)} does not fit {tuple(x.shape)}")
    return block(x, gate_mask)


class ForwardPredictor(nn.Module):
    """
    Decoder-only predictor over ``[spatial ‖ motion]`` tokens. The first block is
    never gated; with gating on, the rest gate the spatial tokens only.
    """

    def __init__(self, dim: int, heads: int, num_tokens: int, cfg: DynamicsConfig) -> None:
        super().__init__()
        self.num_tokens = num_tokens
        self.gating = cfg.gating
        self.pos_embed = grid_position_embedding(num_tokens, dim)
        self.motion_proj = nn.Linear(cfg.midway_dim, dim)
        self.motion_type = nn.Parameter(torch.zeros(1, 1, dim))
        blocks: list[nn.Module] = [Block(dim, heads)]
        for _ in range(cfg.forward_blocks - 1):
            if cfg.gating:
                blocks.append(GatedBlock(dim, heads, gate_bias=cfg.gate_bias))
            else:
                blocks.append(Block(dim, heads))
        self.blocks = nn.ModuleList(blocks)
        self.out_proj = nn.Linear(dim, dim)
        self.apply(init_weights)
        for block in self.blocks:
            if isinstance(block, GatedBlock):
                zero_linear_(block.gate.mlp.fc2)
        nn.init.trunc_normal_(self.motion_type, std=0.02)

    def gate_mask(self, batch: int, motion_tokens: int, device: torch.device) -> torch.Tensor:
        mask = torch.zeros(batch, self.num_tokens + motion_tokens, dtype=torch.bool, device=device)
        mask[:, : self.num_tokens] = True
        return mask

    def forward(self, v: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        if v.shape[1] != self.num_tokens:
            raise ShapeError(
                f"predictor expects {self.num_tokens} spatial tokens, got {v.shape[1]}"
            )
        if m.dim() != 3 or m.shape[0] != v.shape[0]:
            raise ShapeError(f"motion latents {tuple(m.shape)} do not match batch {v.shape[0]}")
        n = self.num_tokens
        x = torch.cat([v + self.pos_embed, self.motion_proj(m) + self.motion_type], dim=1)
        mask = self.gate_mask(v.shape[0], m.shape[1], v.device)
        for block in self.blocks:
            x = block(x, mask) if isinstance(block, GatedBlock) else block(x)
        return self.out_proj(x[:, :n])


@dataclass(frozen=True)
class LevelPlan:
    """Which per-level networks exist and where the dense loss applies."""

    hierarchy: tuple[int, ...]  # ascending taps then top
    loss_levels: tuple[int, ...]
    midway_levels: tuple[int, ...]
    backward_levels: tuple[int, ...]
    predict_levels: tuple[int, ...]

    @property
    def top(self) -> int:
        return self.hierarchy[-1]


def plan_levels(enc: EncoderConfig, dyn: DynamicsConfig) -> LevelPlan:
    taps = tuple(sorted(enc.tap_levels))
    hierarchy = taps + (enc.top_level,)
    if not dyn.latent_dynamics:
        return LevelPlan(hierarchy, (), (), (), ())
    loss_levels = taps if dyn.multi_level else taps[:1]
    if dyn.refinement:
        # every prediction above the lowest tap feeds the next midway step
        predict_levels = taps
        midway_levels = hierarchy[1:]
    else:
        predict_levels = loss_levels
        midway_levels = (enc.top_level,)
    backward_levels = taps if dyn.backward else ()
    return LevelPlan(hierarchy, loss_levels, midway_levels, backward_levels, predict_levels)


@dataclass
class HierarchyOutput:
    predictions: dict[int, torch.Tensor] = field(default_factory=dict)
    motion: dict[int, torch.Tensor] = field(default_factory=dict)
    backward: dict[int, torch.Tensor] = field(default_factory=dict)


class Dynamics(nn.Module):
    """All dynamics networks for one run configuration."""

    def __init__(self, enc: EncoderConfig, dyn: DynamicsConfig) -> None:
        super().__init__()
        self.enc_cfg = enc
        self.cfg = dyn
        self.plan = plan_levels(enc, dyn)
        n, dim = enc.num_tokens, enc.embed_dim
        # base model: no dynamics parameters at all
        self.midway: MidwayPath | None = (
            MidwayPath(list(self.plan.midway_levels), dim, n, dyn) if dyn.latent_dynamics else None
        )
        self.backward = nn.ModuleDict(
            {
                str(level): BackwardRefiner(
                    dim, enc.heads, n, blocks=dyn.backward_blocks, kv_pos=dyn.backward_kv_pos
                )
                for level in self.plan.backward_levels
            }
        )
        self.predictor = nn.ModuleDict(
            {
                str(level): ForwardPredictor(dim, enc.heads, n, dyn)
                for level in self.plan.predict_levels
            }
        )

    @property
    def enabled(self) -> bool:
        return self.cfg.latent_dynamics

    def hierarchy(
        self,
        z_src: dict[int, torch.Tensor],
        z_tgt: dict[int, torch.Tensor],
    ) -> HierarchyOutput:
        """
        Top-down walk over the hierarchy: per step, refine the motion latents
        from the upper level's (predicted) source and the target, refine the
        lateral features, and predict the target features at the lower level.
        """
        out = HierarchyOutput()
        if not self.enabled:
            return out
        plan = self.plan
        top = plan.top
        for level in plan.hierarchy:
            if level not in z_src or level not in z_tgt:
                raise ShapeError(f"feature level {level} missing from the encoder outputs")

        batch = z_src[top].shape[0]
        m = self.midway.initial(batch)
        src_hat = z_src[top]
        v = z_src[top]
        lowest = min(plan.loss_levels)
        pairs = list(zip(plan.hierarchy[1:], plan.hierarchy[:-1]))
        for upper, level in reversed(pairs):
            if level < lowest:
                break
            if str(upper) in self.midway.levels:
                m = self.midway.levels[str(upper)](m, src_hat, z_tgt[upper])
                out.motion[upper] = m
            v = self.backward[str(level)](z_src[level], v) if self.cfg.backward else z_src[level]
            out.backward[level] = v
            if level in plan.predict_levels:
                pred = self.predictor[str(level)](v, m)
                out.predictions[level] = pred
                src_hat = pred
        return out

    def namespaced_state(self) -> dict[str, torch.Tensor]:
        """State dict under ``midway.*``, ``backward.*`` and ``forward.*``."""
        return {to_namespace(key): value for key, value in self.state_dict().items()}

    def load_namespaced_state(self, state: dict[str, torch.Tensor]) -> None:
        self.load_state_dict({from_namespace(key): value for key, value in state.items()})


# internal module prefix -> archive namespace
_NAMESPACES = (
    ("midway.", "midway."),
    ("backward.", "backward.levels."),
    ("predictor.", "forward.levels."),
)


def to_namespace(key: str) -> str:
    for internal, external in _NAMESPACES:
        if key.startswith(internal):
            return external + key[len(internal):]
    raise KeyError(key)


def from_namespace(key: str) -> str:
    for internal, external in _NAMESPACES:
        if key.startswith(external):
            return internal + key[len(external):]
    raise KeyError(key)
