"""
Hand-set network weights with known input/output behaviour.

These turn a freshly built network into an exact identity or token
permutation so perturbation heatmaps and tracks have a closed-form answer.
All functions modify modules in place.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .dynamics import Dynamics, ForwardPredictor, GatedBlock
from .encoder import Encoder
from .errors import ShapeError


class ConstantGate(nn.Module):
    """Gate with a fixed value on every channel."""

    def __init__(self, value: float) -> None:
        super().__init__()
        self.value = value

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.full_like(x, self.value)


class FixedAttention(nn.Module):
    """Attention with fixed mixing weights: ``out[j] = sum_i weights[j, i] * x[i]``."""

    def __init__(self, weights: torch.Tensor) -> None:
        super().__init__()
        self.register_buffer("mixing", weights)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[1] != self.mixing.shape[1]:
            raise ShapeError(
                f"fixed attention over {self.mixing.shape[1]} tokens, got {x.shape[1]}"
            )
        return torch.einsum("ji,bid->bjd", self.mixing.to(x.dtype), x)


def _identity_linear_(layer: nn.Linear) -> None:
    with torch.no_grad():
        layer.weight.copy_(torch.eye(layer.out_features, layer.in_features))
        if layer.bias is not None:
            layer.bias.zero_()


def _transparent_predictor_(predictor: ForwardPredictor) -> None:
    with torch.no_grad():
        predictor.pos_embed.zero_()
    for block in predictor.blocks:
        block.zero_residual_branches_()
        if isinstance(block, GatedBlock):
            block.gate = ConstantGate(1.0)
    _identity_linear_(predictor.out_proj)


def _transparent_backward_(dynamics: Dynamics) -> None:
    for refiner in dynamics.backward.values():
        refiner.zero_residual_branches_()


def identity_oracle_(dynamics: Dynamics) -> Dynamics:
    """Every prediction equals the lateral source features at its level."""
    if not dynamics.enabled:
        raise ShapeError("identity oracle needs latent dynamics")
    _transparent_backward_(dynamics)
    for predictor in dynamics.predictor.values():
        _transparent_predictor_(predictor)
    return dynamics


def grid_shift(grid: tuple[int, int], shift: tuple[int, int]) -> list[int]:
    """Token permutation for a wrapped (rows, cols) shift: entry ``i`` is where token ``i`` goes."""
    gh, gw = grid
    dr, dc = shift
    return [((r + dr) % gh) * gw + (c + dc) % gw for r in range(gh) for c in range(gw)]


def permutation_oracle_(dynamics: Dynamics, perm: list[int]) -> Dynamics:
    """
    Every prediction is a token permutation of the lateral source features:
    output token ``perm[i]`` copies input token ``i``.

    The first gated block closes its gate on the spatial tokens and mixes them
    with a fixed permutation; every other sublayer is an identity.
    """
    if not dynamics.enabled:
        raise ShapeError("permutation oracle needs latent dynamics")
    if not dynamics.cfg.gating or dynamics.cfg.forward_blocks < 2:
        raise ShapeError("permutation oracle needs a gated block (gating on, forward_blocks >= 2)")
    n = dynamics.enc_cfg.num_tokens
    if sorted(perm) != list(range(n)):
        raise ShapeError(f"not a permutation of {n} tokens")
    total = n + dynamics.cfg.num_motion_tokens
    mixing = torch.eye(total)
    mixing[:n, :n] = 0.0
    for i, j in enumerate(perm):
        mixing[j, i] = 1.0

    _transparent_backward_(dynamics)
    for predictor in dynamics.predictor.values():
        _transparent_predictor_(predictor)
        gated = next(b for b in predictor.blocks if isinstance(b, GatedBlock))
        gated.gate = ConstantGate(0.0)
        gated.norm1 = nn.Identity()
        gated.attn = FixedAttention(mixing.clone())
    return dynamics


def shift_oracle_(dynamics: Dynamics, shift: tuple[int, int]) -> Dynamics:
    grid = (dynamics.enc_cfg.grid_size, dynamics.enc_cfg.grid_size)
    return permutation_oracle_(dynamics, grid_shift(grid, shift))


def patch_local_encoder_(encoder: Encoder) -> Encoder:
    """Each exported token becomes a function of its own patch only."""
    with torch.no_grad():
        encoder.pos_embed.zero_()
    for block in encoder.blocks:
        block.zero_residual_branches_()
    return encoder


def zero_motion_(dynamics: Dynamics) -> Dynamics:
    """Midway networks return their incoming latents unchanged."""
    if dynamics.midway is not None:
        for net in dynamics.midway.levels.values():
            net.zero_output_()
    return dynamics
