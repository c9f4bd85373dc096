"""Fusing generative features into the visual token stream.

The full ("pooled") path compresses each diffusion tap to a fixed number of
tokens at the visual width, then runs a cascade of decoder blocks where the
joint template+search tokens cross-attend to one pooled tap per block. The
two ablation paths skip the generative branch and inject language directly:
"modulation" gates the visual tokens with a pooled text vector, "concat"
appends projected text tokens to the sequence.
"""

from __future__ import annotations

from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import FeedForward, MultiHeadAttention
from .diffusion import TapShape
from .errors import ConfigError, ShapeError


class FusionMode(Enum):
    POOLED = "pooled"
    MODULATION = "modulation"
    CONCAT = "concat"

    @classmethod
    def parse(cls, name: str) -> "FusionMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown fusion mode {name!r}; expected one of: {valid}")


def reduce_tokens(x: torch.Tensor, m: int) -> torch.Tensor:
    """(B, N, C) -> (B, m, C) by adaptive average pooling on the token axis.

    When N is a multiple of m this is an exact mean over contiguous groups
    of N/m tokens; other ratios fall back to the standard adaptive rule.
    """
    return F.adaptive_avg_pool1d(x.transpose(1, 2), m).transpose(1, 2)


class AttentionPooling(nn.Module):
    """One diffusion tap -> (B, m_pool, out_dim) summary tokens.

    Self-attention runs directly on tokens + learned positional encoding;
    channel alignment to the visual width happens inside the attention
    value path, so queries and keys stay in the tap's native width and a
    single-token tap comes out as exactly its own value projection.
    """

    def __init__(self, tap: TapShape, out_dim: int, m_pool: int, heads: int = 1):
        super().__init__()
        self.tap = tap
        self.m_pool = m_pool
        self.pos = nn.Parameter(torch.zeros(1, tap.tokens, tap.channels))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.attn = MultiHeadAttention(tap.channels, heads=heads,
                                       attn_dim=tap.channels, v_dim=out_dim,
                                       project_out=False)
        self.norm_ff = nn.LayerNorm(out_dim)
        self.ff = FeedForward(out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (self.tap.tokens, self.tap.channels):
            raise ShapeError(f"tap tensor must be (B, {self.tap.tokens}, "
                             f"{self.tap.channels}), got {tuple(x.shape)}")
        x = self.attn(x + self.pos)           # (B, N, out_dim)
        x = reduce_tokens(x, self.m_pool)     # (B, m_pool, out_dim)
        return x + self.ff(self.norm_ff(x))


class DecodeBlock(nn.Module):
    """Pre-LN residual block; attention carries no output projection, so
    zeroing the value paths (and the FFN tail) makes the block an exact
    identity."""

    def __init__(self, dim: int, heads: int = 1, cross: bool = True, kv_dim: int | None = None):
        super().__init__()
        self.norm_sa = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads=heads, project_out=False)
        self.cross_attn = None
        if cross:
            self.norm_ca = nn.LayerNorm(dim)
            self.cross_attn = MultiHeadAttention(dim, kv_dim=kv_dim or dim, heads=heads,
                                                 attn_dim=dim, v_dim=dim, project_out=False)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None,
                context_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.self_attn(self.norm_sa(x))
        if self.cross_attn is not None:
            x = x + self.cross_attn(self.norm_ca(x), context=context, key_mask=context_mask)
        x = x + self.ff(self.norm_ff(x))
        return x

    @torch.no_grad()
    def zero_output_paths(self):
        self.self_attn.zero_output_path()
        if self.cross_attn is not None:
            self.cross_attn.zero_output_path()
        self.ff.zero_output_path()


class FusionModule(nn.Module):
    """Joins visual tokens with generative or textual context.

    forward takes the template/search token segments from the visual
    encoder, the diffusion taps (pooled mode only) and the encoded caption,
    and returns the fused search-segment tokens.
    """

    def __init__(self, visual_dim: int, text_dim: int, tap_shapes: list[TapShape],
                 n_template: int, n_search: int, mode: FusionMode = FusionMode.POOLED,
                 n_decoders: int = 3, m_pool: int | None = None, heads: int = 1):
        super().__init__()
        self.mode = mode
        self.n_template = n_template
        self.n_search = n_search
        self.visual_dim = visual_dim
        self.m_pool = m_pool or n_template

        if mode is FusionMode.POOLED:
            if len(tap_shapes) != n_decoders:
                raise ConfigError(f"pooled fusion needs one tap per decoder block: "
                                  f"{len(tap_shapes)} taps vs n_decoders={n_decoders}")
            self.poolers = nn.ModuleList(
                AttentionPooling(t, visual_dim, self.m_pool, heads=heads) for t in tap_shapes)
            self.blocks = nn.ModuleList(
                DecodeBlock(visual_dim, heads=heads, cross=True) for _ in range(n_decoders))
        elif mode is FusionMode.MODULATION:
            self.text_gate = nn.Linear(text_dim, visual_dim)
            self.blocks = nn.ModuleList(
                DecodeBlock(visual_dim, heads=heads, cross=False) for _ in range(n_decoders))
        else:  # CONCAT
            self.text_proj = nn.Linear(text_dim, visual_dim)
            self.blocks = nn.ModuleList(
                DecodeBlock(visual_dim, heads=heads, cross=False) for _ in range(n_decoders))

    @staticmethod
    def pool_text(text: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Mean over real tokens; an empty caption pools to the zero vector."""
        counts = mask.sum(dim=1, keepdim=True).clamp(min=1)
        return (text * mask.unsqueeze(-1)).sum(dim=1) / counts

    def forward(self, f_tp: torch.Tensor, f_sr: torch.Tensor,
                taps: list[torch.Tensor] | None, text: torch.Tensor,
                text_mask: torch.Tensor) -> torch.Tensor:
        if f_tp.shape[1] != self.n_template or f_sr.shape[1] != self.n_search:
            raise ShapeError(f"expected {self.n_template} template / {self.n_search} search "
                             f"tokens, got {f_tp.shape[1]} / {f_sr.shape[1]}")
        x = torch.cat([f_tp, f_sr], dim=1)

        if self.mode is FusionMode.POOLED:
            if taps is None or len(taps) != len(self.poolers):
                raise ShapeError("pooled fusion requires one tap tensor per decoder block")
            for pooler, block, tap in zip(self.poolers, self.blocks, taps):
                x = block(x, context=pooler(tap))
        elif self.mode is FusionMode.MODULATION:
            gate = self.text_gate(self.pool_text(text, text_mask)).unsqueeze(1)
            x = x * gate + x
            for block in self.blocks:
                x = block(x)
        else:  # CONCAT: append projected text tokens, masked ones included
            # as zeros so sequence length stays fixed.
            t = self.text_proj(text) * text_mask.unsqueeze(-1)
            x = torch.cat([x, t], dim=1)
            for block in self.blocks:
                x = block(x)

        return x[:, self.n_template:self.n_template + self.n_search]

    @torch.no_grad()
    def zero_output_paths(self):
        for block in self.blocks:
            block.zero_output_paths()
