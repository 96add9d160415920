"""Auxiliary codec supervision: ASR on the content branch, contrastive
prompt alignment on the prompt branch, and the weighted total loss.

The prompt-text encoder is a frozen stand-in: each whitespace token hashes
to a fixed Gaussian vector (counter-based PRNG keyed by the token's sha256),
the bag is summed and unit-normalized. Stable targets, zero training cost.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import vocab
from .layers import CrossAttnDecoderBlock, LearnedPositions, MultiHeadAttention, causal_mask

PROMPT_EMBED_DIM = 128


@dataclass(frozen=True)
class LossWeights:
    lambda_asr: float = 2.0
    lambda_clap: float = 0.8


def total_codec_loss(l_rec, l_asr, l_clap, weights: LossWeights = LossWeights()):
    """Reconstruction plus weighted ASR and CLAP terms."""
    for name, v in (("l_rec", l_rec), ("l_asr", l_asr), ("l_clap", l_clap)):
        t = v if isinstance(v, Tensor) else torch.tensor(float(v))
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite loss component {name}")
    return l_rec + weights.lambda_asr * l_asr + weights.lambda_clap * l_clap


@lru_cache(maxsize=4096)
def _token_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.standard_normal(dim)


def prompt_text_embed(prompt: str, dim: int = PROMPT_EMBED_DIM) -> Tensor:
    """Deterministic unit-norm embedding of a prompt string."""
    tokens = prompt.split() or [""]
    acc = np.zeros(dim)
    for tok in tokens:
        acc = acc + _token_vector(tok, dim)
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        acc = _token_vector("", dim)
        norm = np.linalg.norm(acc)
    return torch.from_numpy(acc / norm).float()


def prompt_text_embed_batch(prompts: list[str], dim: int = PROMPT_EMBED_DIM) -> Tensor:
    return torch.stack([prompt_text_embed(p, dim) for p in prompts])


class ClapHead(nn.Module):
    """Learned-query cross-attention pooling of prompt-branch features to a
    fixed-length unit-norm embedding, with a learnable contrastive
    temperature (init 0.07)."""

    def __init__(
        self,
        in_dim: int,
        dim: int = 128,
        heads: int = 4,
        n_queries: int = 4,
        embed_dim: int = PROMPT_EMBED_DIM,
    ):
        super().__init__()
        self.in_proj = nn.Linear(in_dim, dim)
        self.queries = nn.Parameter(torch.randn(n_queries, dim) * 0.02)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, embed_dim)
        self.log_tau = nn.Parameter(torch.tensor(math.log(0.07)))

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()

    def forward(self, prompt_feats: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        """(B, T, in_dim) features to (B, embed_dim) unit-norm embeddings."""
        if prompt_feats.dim() != 3 or prompt_feats.shape[1] == 0:
            raise ValueError("clap_pool requires a non-empty (B, T, D) feature sequence")
        mem = self.in_proj(prompt_feats)
        q = self.queries.unsqueeze(0).expand(mem.shape[0], -1, -1)
        pooled = self.attn(q, memory=mem, key_padding_mask=key_padding_mask)
        pooled = self.norm(pooled).mean(dim=1)
        return F.normalize(self.out_proj(pooled), dim=-1)


def clap_loss(audio_emb: Tensor, text_emb: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE over the cosine-similarity matrix, diagonal targets."""
    if audio_emb.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if audio_emb.shape != text_emb.shape:
        raise ValueError("audio/text embedding batches must match in shape")
    a = F.normalize(audio_emb, dim=-1)
    t = F.normalize(text_emb, dim=-1)
    sim = a @ t.t() / tau
    labels = torch.arange(sim.shape[0], device=sim.device)
    return 0.5 * (F.cross_entropy(sim, labels) + F.cross_entropy(sim.t(), labels))


class AsrHead(nn.Module):
    """Small autoregressive character decoder cross-attending to
    content-branch features only."""

    def __init__(
        self,
        in_dim: int,
        dim: int = 128,
        heads: int = 4,
        layers: int = 2,
        text_vocab: int = vocab.VOCAB_SIZE,
        max_len: int = 64,
    ):
        super().__init__()
        self.text_vocab = text_vocab
        self.in_proj = nn.Linear(in_dim, dim)
        self.char_emb = nn.Embedding(text_vocab, dim)
        self.pos = LearnedPositions(max_len, dim)
        self.blocks = nn.ModuleList(CrossAttnDecoderBlock(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, text_vocab)

    def decode(
        self,
        text_in: Tensor,
        content_feats: Tensor,
        memory_key_padding_mask: Tensor | None = None,
    ) -> Tensor:
        """Teacher-forced logits (B, L, vocab) for shifted text inputs."""
        mem = self.in_proj(content_feats)
        x = self.char_emb(text_in) + self.pos(text_in.shape[1], device=text_in.device)
        mask = causal_mask(text_in.shape[1], device=text_in.device)
        for block in self.blocks:
            x = block(x, mem, self_mask=mask, memory_key_padding_mask=memory_key_padding_mask)
        return self.head(self.norm(x))

    def loss(
        self,
        content_feats: Tensor,
        text_ids: Tensor,
        text_lengths: Tensor,
        memory_key_padding_mask: Tensor | None = None,
    ) -> Tensor:
        """Teacher-forced cross-entropy of text given content features.

        text_ids is (B, L) right-padded; slot i predicts character i and the
        slot after the last character predicts EOS (when the row has room).
        """
        if text_ids.dim() != 2:
            raise ValueError(f"expected (B, L) text ids, got {tuple(text_ids.shape)}")
        if (text_lengths < 1).any():
            raise ValueError("asr_loss requires non-empty target text")
        b, l = text_ids.shape
        device = text_ids.device
        bos = torch.full((b, 1), vocab.BOS, dtype=torch.long, device=device)
        text_in = torch.cat([bos, text_ids[:, :-1]], dim=1)
        logits = self.decode(text_in, content_feats, memory_key_padding_mask)

        positions = torch.arange(l, device=device).unsqueeze(0)
        in_range = positions < text_lengths.unsqueeze(1)
        targets = torch.where(in_range, text_ids, torch.full_like(text_ids, -100))
        has_room = text_lengths < l
        rows = torch.arange(b, device=device)[has_room]
        targets[rows, text_lengths[has_room]] = vocab.EOS
        return F.cross_entropy(
            logits.reshape(-1, self.text_vocab), targets.reshape(-1), ignore_index=-100
        )
