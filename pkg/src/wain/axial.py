"""Axial transformer blocks: row attention, then column attention, then a GELU
feed-forward, all pre-normalized with residuals."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    """Scaled dot-product self-attention with learned q/k/v/output projections."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k=None, v=None, return_weights: bool = False):
        k = q if k is None else k
        v = k if v is None else v
        n, lq, c = q.shape
        if k.shape[1] != v.shape[1]:
            raise ValueError("key and value sequences differ in length")
        d = c // self.heads

        def split(t):
            return t.reshape(n, -1, self.heads, d).transpose(1, 2)

        qh, kh, vh = split(self.q(q)), split(self.k(k)), split(self.v(v))
        logits = qh @ kh.transpose(-1, -2) / d ** 0.5
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite attention logits")
        weights = logits.softmax(dim=-1)
        y = (weights @ vh).transpose(1, 2).reshape(n, lq, c)
        y = self.out(y)
        return (y, weights) if return_weights else y


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__(nn.Linear(dim, expansion * dim), nn.GELU(), nn.Linear(expansion * dim, dim))


class AxialPositionEmbedding(nn.Module):
    def __init__(self, rows: int, cols: int, dim: int):
        super().__init__()
        self.row_embed = nn.Parameter(torch.randn(rows, dim) * 0.02)
        self.col_embed = nn.Parameter(torch.randn(cols, dim) * 0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return add_axial_embeddings(x, self.row_embed, self.col_embed)


def add_axial_embeddings(x: torch.Tensor, row_embed: torch.Tensor, col_embed: torch.Tensor) -> torch.Tensor:
    """``x`` is channels-last ``(B, H, W, C)``; adds ``row_embed[i] + col_embed[j]`` at (i, j)."""
    _, h, w, c = x.shape
    if row_embed.shape != (h, c) or col_embed.shape != (w, c):
        raise ValueError(
            f"embedding tables {tuple(row_embed.shape)}/{tuple(col_embed.shape)} "
            f"do not match a {h}x{w}x{c} map"
        )
    return x + row_embed[:, None, :] + col_embed[None, :, :]


class AxialBlock(nn.Module):
    """Operates on channels-last maps ``(B, H, W, C)``."""

    def __init__(self, dim: int, heads: int = 4, expansion: int = 4):
        super().__init__()
        self.norm_row = nn.LayerNorm(dim)
        self.row_attn = MultiHeadAttention(dim, heads)
        self.norm_col = nn.LayerNorm(dim)
        self.col_attn = MultiHeadAttention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        rows = self.norm_row(x).reshape(b * h, w, c)
        x = x + self.row_attn(rows).reshape(b, h, w, c)
        cols = self.norm_col(x).transpose(1, 2).reshape(b * w, h, c)
        x = x + self.col_attn(cols).reshape(b, w, h, c).transpose(1, 2)
        return x + self.ff(self.norm_ff(x))

    def attention_weights(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-head weights of both axes for the input ``x`` (diagnostics only)."""
        b, h, w, c = x.shape
        rows = self.norm_row(x).reshape(b * h, w, c)
        y, w_row = self.row_attn(rows, return_weights=True)
        x = x + y.reshape(b, h, w, c)
        cols = self.norm_col(x).transpose(1, 2).reshape(b * w, h, c)
        _, w_col = self.col_attn(cols, return_weights=True)
        return w_row, w_col


class AxialStack(nn.Module):
    """Position embeddings added once, then ``depth`` axial blocks.  Takes and
    returns channels-first ``(B, C, H, W)`` maps."""

    def __init__(self, rows: int, cols: int, dim: int, depth: int = 4, heads: int = 4,
                 expansion: int = 4, use_position: bool = True):
        super().__init__()
        self.position = AxialPositionEmbedding(rows, cols, dim) if use_position else None
        self.blocks = nn.ModuleList(AxialBlock(dim, heads, expansion) for _ in range(depth))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        if self.position is not None:
            x = self.position(x)
        for block in self.blocks:
            x = block(x)
        return x.permute(0, 3, 1, 2)


def full_attention(x: torch.Tensor, attn: MultiHeadAttention) -> torch.Tensor:
    """Standard attention over all ``H*W`` positions of a channels-last map."""
    b, h, w, c = x.shape
    return attn(x.reshape(b, h * w, c)).reshape(b, h, w, c)


def axial_flop_estimate(h: int, w: int, c: int, heads: int = 4) -> tuple[int, int]:
    """Multiplies spent on attention scores plus weighted aggregation.

    Row attention costs ``h * w^2 * c`` for the scores and the same again to apply
    them; column attention swaps the roles.  Full attention over ``h*w`` tokens costs
    ``(h*w)^2 * c`` twice.  Head count splits ``c`` and cancels out.
    """
    if min(h, w, c, heads) <= 0:
        raise ValueError("dimensions must be positive")
    axial = 2 * c * (h * w * w + w * h * h)
    full = 2 * c * (h * w) ** 2
    return axial, full
