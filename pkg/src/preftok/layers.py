"""Transformer building blocks shared by the codec, heads, and token LM.

Attention is written out explicitly (einsum-free, plain matmul + softmax)
so masking semantics are exact: fully masked-out key lanes contribute a
weight of exactly zero, which the causality tests rely on bit-for-bit.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def causal_mask(t: int, device=None) -> Tensor:
    """Additive (t, t) mask: 0 on and below the diagonal, -inf above."""
    m = torch.full((t, t), float("-inf"), device=device)
    return torch.triu(m, diagonal=1)


def _masked_softmax(scores: Tensor, key_padding_mask: Tensor | None) -> Tensor:
    # scores: (B, H, Tq, Tk); key_padding_mask: (B, Tk) True where padded
    if key_padding_mask is not None:
        scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
    # rows with every key masked (pad queries) fall back to uniform weights
    # so no NaN enters the graph; such rows are never read by real positions
    dead = torch.isneginf(scores).all(dim=-1, keepdim=True)
    scores = torch.where(dead, torch.zeros_like(scores), scores)
    return torch.softmax(scores, dim=-1)


class MultiHeadAttention(nn.Module):
    """Self- or cross-attention over (B, T, D) inputs."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self,
        x: Tensor,
        memory: Tensor | None = None,
        attn_mask: Tensor | None = None,
        key_padding_mask: Tensor | None = None,
    ) -> Tensor:
        mem = x if memory is None else memory
        b, tq, _ = x.shape
        tk = mem.shape[1]

        def split(t: Tensor, length: int) -> Tensor:
            return t.view(b, length, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(x), tq)
        k = split(self.k_proj(mem), tk)
        v = split(self.v_proj(mem), tk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if attn_mask is not None:
            scores = scores + attn_mask
        attn = _masked_softmax(scores, key_padding_mask)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, attn_mask=None, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), attn_mask=attn_mask, key_padding_mask=key_padding_mask)
        return x + self.ff(self.norm2(x))


class ConvModule(nn.Module):
    """Conformer-style convolution: pointwise-GLU, depthwise, pointwise."""

    def __init__(self, dim: int, kernel_size: int = 5):
        super().__init__()
        self.pw1 = nn.Conv1d(dim, 2 * dim, 1)
        self.dw = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.pw2 = nn.Conv1d(dim, dim, 1)

    def forward(self, x: Tensor, pad_mask: Tensor | None = None) -> Tensor:
        # zero padded frames so the kernel never mixes pad garbage inward
        if pad_mask is not None:
            x = x.masked_fill(pad_mask[:, :, None], 0.0)
        y = x.transpose(1, 2)
        y = F.glu(self.pw1(y), dim=1)
        y = F.silu(self.dw(y))
        y = self.pw2(y)
        return y.transpose(1, 2)


class ConformerBlock(nn.Module):
    """Pre-norm attention + convolution + feed-forward, non-causal."""

    def __init__(self, dim: int, heads: int, kernel_size: int = 5):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm_conv = nn.LayerNorm(dim)
        self.conv = ConvModule(dim, kernel_size)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm_attn(x), key_padding_mask=key_padding_mask)
        x = x + self.conv(self.norm_conv(x), pad_mask=key_padding_mask)
        return x + self.ff(self.norm_ff(x))


class CrossAttnDecoderBlock(nn.Module):
    """Pre-norm causal self-attention + cross-attention + feed-forward."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, memory, self_mask=None, memory_key_padding_mask=None):
        x = x + self.self_attn(self.norm_self(x), attn_mask=self_mask)
        x = x + self.cross_attn(
            self.norm_cross(x), memory=memory, key_padding_mask=memory_key_padding_mask
        )
        return x + self.ff(self.norm_ff(x))


class LearnedPositions(nn.Module):
    def __init__(self, max_len: int, dim: int):
        super().__init__()
        self.max_len = max_len
        self.emb = nn.Embedding(max_len, dim)

    def forward(self, t: int | Tensor, device=None) -> Tensor:
        """Embeddings for 0..t-1, or for an explicit (B, T) position-id tensor."""
        if isinstance(t, Tensor):
            return self.emb(t)
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max context {self.max_len}")
        return self.emb(torch.arange(t, device=device))
