"""Text and visual encoders.

The text side is a small transformer over a fixed closed vocabulary. The
visual side is a siamese patch encoder: template and search crops go
through the same weights independently, and the cross-crop interaction
happens later in the fusion decoder, not here.
"""

from __future__ import annotations

import re

import numpy as np
import torch
import torch.nn as nn

from .blocks import SelfAttentionBlock
from .errors import ShapeError
from .vocab import OOV_ID, PAD_ID, TEXT_LEN, VOCAB

_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize(caption: str, length: int = TEXT_LEN) -> list[int]:
    """Map a caption to exactly ``length`` ids (PAD-filled, truncated).

    Lowercases, keeps alphanumeric runs, looks words up in the closed
    vocabulary and maps unknown ones to the OOV id. An empty or whitespace
    caption yields all PAD.
    """
    words = _WORD_RE.findall(caption.lower())
    ids = [VOCAB.get(w, OOV_ID) for w in words][:length]
    ids.extend([PAD_ID] * (length - len(ids)))
    return ids


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 HWC RGB image -> float32 CHW tensor in [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected HWC RGB image, got shape {img.shape}")
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float() / 255.0


class TextEncoder(nn.Module):
    """Caption -> (B, TEXT_LEN, dim) features plus a validity mask.

    PAD positions are masked out of attention and zeroed in the output, so
    an empty caption produces an all-zero, all-masked token sequence and
    consumers see "no text" rather than garbage embeddings.
    """

    def __init__(self, dim: int = 64, layers: int = 2, heads: int = 4,
                 vocab_size: int | None = None, max_len: int = TEXT_LEN):
        super().__init__()
        vocab_size = vocab_size or (max(VOCAB.values()) + 1)
        self.max_len = max_len
        self.dim = dim
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.pos = nn.Parameter(torch.zeros(1, max_len, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.layers = nn.ModuleList(SelfAttentionBlock(dim, heads=heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def encode_batch(self, captions: list[str], device=None) -> torch.Tensor:
        ids = [tokenize(c, self.max_len) for c in captions]
        return torch.tensor(ids, dtype=torch.long, device=device)

    def forward(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if token_ids.ndim != 2 or token_ids.shape[1] != self.max_len:
            raise ShapeError(f"token_ids must be (B, {self.max_len}), got {tuple(token_ids.shape)}")
        mask = token_ids != PAD_ID  # (B, L) True on real words
        x = self.embed(token_ids) + self.pos
        for layer in self.layers:
            x = layer(x, key_mask=mask)
        x = self.norm(x)
        return x * mask.unsqueeze(-1), mask


class PatchEncoder(nn.Module):
    """Siamese ViT-style encoder: one image in, one token grid out.

    A single learned positional table lives on the reference grid (the
    largest input this encoder serves); smaller inputs take its top-left
    sub-grid, so template and search crops of different sizes share every
    weight. Grids larger than the reference are rejected.
    """

    def __init__(self, dim: int = 192, depth: int = 4, heads: int = 4, patch: int = 16,
                 ref_size: int = 128, in_ch: int = 3):
        super().__init__()
        if ref_size % patch:
            raise ShapeError(f"patch={patch} must divide the reference size {ref_size}")
        self.patch = patch
        self.dim = dim
        self.ref_grid = ref_size // patch
        self.proj = nn.Conv2d(in_ch, dim, kernel_size=patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, self.ref_grid, self.ref_grid, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.layers = nn.ModuleList(SelfAttentionBlock(dim, heads=heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def grid_of(self, size: int) -> int:
        if size % self.patch:
            raise ShapeError(f"input side {size} not divisible by patch {self.patch}")
        g = size // self.patch
        if g > self.ref_grid:
            raise ShapeError(f"input grid {g} exceeds positional table ({self.ref_grid})")
        return g

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim != 4 or img.shape[-1] != img.shape[-2]:
            raise ShapeError(f"expected square (B, C, S, S) input, got {tuple(img.shape)}")
        g = self.grid_of(img.shape[-1])
        x = self.proj(img).flatten(2).transpose(1, 2)  # (B, g*g, dim)
        x = x + self.pos[:, :g, :g].reshape(1, g * g, self.dim)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)
