"""Transformer primitives shared by the encoder and the dynamics networks."""

from __future__ import annotations

import torch
import torch.nn as nn
from timm.layers import DropPath, Mlp, trunc_normal_


def init_weights(module: nn.Module) -> None:
    """ViT initialisation: truncated-normal linears, unit LayerNorms."""
    if isinstance(module, nn.Linear):
        trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def zero_linear_(layer: nn.Linear) -> None:
    with torch.no_grad():
        layer.weight.zero_()
        if layer.bias is not None:
            layer.bias.zero_()


class Attention(nn.Module):
    """
    Multi-head attention; self-attention when *context* is None.

    Written with an explicit softmax so forward-mode AD and hand-set weights
    behave the same on every backend.
    """

    def __init__(self, dim: int, heads: int, *, qkv_bias: bool = True) -> None:
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.kv = nn.Linear(dim, 2 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def _project(self, x: torch.Tensor, context: torch.Tensor | None):
        context = x if context is None else context
        b, n, c = x.shape
        m = context.shape[1]
        h = self.heads
        q = self.q(x).reshape(b, n, h, c // h).transpose(1, 2)
        k, v = self.kv(context).reshape(b, m, 2, h, c // h).permute(2, 0, 3, 1, 4)
        return q, k, v

    def weights(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        """Attention probabilities, shape (B, heads, N, M)."""
        q, k, _ = self._project(x, context)
        return ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        b, n, c = x.shape
        q, k, v = self._project(x, context)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block: ``x + attn(norm(x))`` then ``x + mlp(norm(x))``."""

    def __init__(
        self,
        dim: int,
        heads: int,
        *,
        mlp_ratio: float = 4.0,
        drop_path: float = 0.0,
    ) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.drop_path = DropPath(drop_path) if drop_path > 0.0 else nn.Identity()
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(in_features=dim, hidden_features=int(dim * mlp_ratio), act_layer=nn.GELU)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_path(self.attn(self.norm1(x)))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x

    def zero_residual_branches_(self) -> None:
        """Make the block an exact identity map."""
        zero_linear_(self.attn.proj)
        zero_linear_(self.mlp.fc2)


class CrossBlock(nn.Module):
    """Pre-norm cross-attention block: queries from *x*, keys/values from *context*."""

    def __init__(self, dim: int, heads: int, *, mlp_ratio: float = 4.0) -> None:
        super().__init__()
        self.norm_q = nn.LayerNorm(dim, eps=1e-6)
        self.norm_kv = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(in_features=dim, hidden_features=int(dim * mlp_ratio), act_layer=nn.GELU)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_kv(context))
        x = x + self.mlp(self.norm2(x))
        return x

    def zero_residual_branches_(self) -> None:
        zero_linear_(self.attn.proj)
        zero_linear_(self.mlp.fc2)


def grid_position_embedding(num_tokens: int, dim: int) -> nn.Parameter:
    pos = nn.Parameter(torch.zeros(1, num_tokens, dim))
    trunc_normal_(pos, std=0.02)
    return pos
