"""Shared transformer primitives: attention with exact padding semantics,
feed-forward blocks, and sinusoidal timestep embeddings.

The masking contract matters for correctness, not just stability: padded
keys receive exactly-zero attention weight, and a query row whose keys are
all masked outputs an exactly-zero vector with finite gradients. Callers
rely on this to feed empty captions through cross-attention safely.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention over (..., L, D) with a boolean key mask.

    key_mask is (..., Lk) with True = attend. Masked weights are exactly 0
    after softmax; fully-masked query rows return exact zeros.
    """
    scale = q.shape[-1] ** -0.5
    scores = torch.matmul(q, k.transpose(-2, -1)) * scale
    if key_mask is None:
        return torch.matmul(scores.softmax(dim=-1), v)
    mask = key_mask.unsqueeze(-2)  # broadcast over query rows
    scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
    attn = scores.softmax(dim=-1)
    # Zero out residual mass; an all-masked row becomes uniform after
    # softmax and this multiply collapses it to exact zeros.
    attn = attn * mask.to(attn.dtype)
    return torch.matmul(attn, v)


class MultiHeadAttention(nn.Module):
    """Multi-head attention with independently sized query/key and value paths.

    q_dim/kv_dim are the input widths; attn_dim carries queries and keys,
    v_dim carries values and (with project_out=False) the output. Setting
    v_dim to the residual width and project_out=False gives a block whose
    only learnable output path is the value projection.
    """

    def __init__(self, q_dim: int, kv_dim: int | None = None, heads: int = 4,
                 attn_dim: int | None = None, v_dim: int | None = None,
                 project_out: bool = True):
        super().__init__()
        kv_dim = kv_dim or q_dim
        attn_dim = attn_dim or q_dim
        v_dim = v_dim or attn_dim
        if attn_dim % heads or v_dim % heads:
            raise ValueError(f"heads={heads} must divide attn_dim={attn_dim} and v_dim={v_dim}")
        self.heads = heads
        self.to_q = nn.Linear(q_dim, attn_dim)
        self.to_k = nn.Linear(kv_dim, attn_dim)
        self.to_v = nn.Linear(kv_dim, v_dim)
        self.to_out = nn.Linear(v_dim, v_dim) if project_out else None

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, _ = x.shape
        m = context.shape[1]
        h = self.heads

        def split(t, length):
            return t.view(b, length, h, -1).transpose(1, 2)  # (B, h, L, d)

        q = split(self.to_q(x), n)
        k = split(self.to_k(context), m)
        v = split(self.to_v(context), m)
        km = key_mask.unsqueeze(1) if key_mask is not None else None  # (B, 1, Lk)
        out = masked_attention(q, k, v, km)
        out = out.transpose(1, 2).reshape(b, n, -1)
        return self.to_out(out) if self.to_out is not None else out

    @torch.no_grad()
    def zero_output_path(self):
        """Zero the last learnable projection so the module outputs zeros."""
        target = self.to_out if self.to_out is not None else self.to_v
        target.weight.zero_()
        target.bias.zero_()


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult),
            nn.GELU(),
            nn.Linear(dim * mult, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    @torch.no_grad()
    def zero_output_path(self):
        self.net[-1].weight.zero_()
        self.net[-1].bias.zero_()


class SelfAttentionBlock(nn.Module):
    """Pre-LN residual self-attention + feed-forward, the encoder workhorse."""

    def __init__(self, dim: int, heads: int = 4, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads=heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, mult=ff_mult)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_mask=key_mask)
        return x + self.ff(self.norm2(x))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32,
                                                           device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
