"""Speech-token codec with dual FSQ preference branches.

A non-causal conformer extractor maps speech tokens to a continuous
representation, two independent FSQ branches quantize per-frame linear
projections of it into content and prompt preference tokens, and a causal
transformer combiner reconstructs the original tokens from the pair. The
combiner consumes learned linear embeddings of the dequantized grid
vectors, so reconstruction gradients reach the extractor through the
straight-through quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .fsq import FiniteScalarQuantizer
from .layers import ConformerBlock, LearnedPositions, TransformerBlock, causal_mask


@dataclass(frozen=True)
class CodecConfig:
    extractor_layers: int = 5
    combiner_layers: int = 4
    model_dim: int = 256
    heads: int = 4
    noise_std: float = 0.01
    speech_vocab: int = 512
    content_levels: tuple[int, ...] = (6, 6, 6, 6)   # 1296 codes
    prompt_levels: tuple[int, ...] = (4, 4, 4)       # 64 codes
    max_frames: int = 256

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class PreferenceTokenPair:
    """Frame-aligned content and prompt token ids, shape (B, T)."""

    content: Tensor
    prompt: Tensor

    def __post_init__(self):
        if self.content.shape != self.prompt.shape:
            raise ValueError(
                f"misaligned preference streams: {tuple(self.content.shape)} "
                f"vs {tuple(self.prompt.shape)}"
            )


def inject_noise(z: Tensor, noise_std: float, generator: torch.Generator | None = None) -> Tensor:
    """Add elementwise zero-mean Gaussian noise; a no-op at std 0."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if noise_std == 0:
        return z
    eps = torch.empty_like(z).normal_(0.0, noise_std, generator=generator)
    return z + eps


class PreferenceCodec(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim

        self.token_emb = nn.Embedding(cfg.speech_vocab, d)
        self.extract_pos = LearnedPositions(cfg.max_frames, d)
        self.extractor = nn.ModuleList(
            ConformerBlock(d, cfg.heads) for _ in range(cfg.extractor_layers)
        )
        self.extract_norm = nn.LayerNorm(d)

        self.content_fsq = FiniteScalarQuantizer(cfg.content_levels)
        self.prompt_fsq = FiniteScalarQuantizer(cfg.prompt_levels)
        self.content_proj = nn.Linear(d, self.content_fsq.dim)
        self.prompt_proj = nn.Linear(d, self.prompt_fsq.dim)

        # per-frame token embeddings for the combiner, as linear maps of the
        # dequantized grid vectors (keeps the straight-through path alive)
        self.content_in = nn.Linear(self.content_fsq.dim, d)
        self.prompt_in = nn.Linear(self.prompt_fsq.dim, d)
        self.combine_pos = LearnedPositions(cfg.max_frames, d)
        self.combiner = nn.ModuleList(
            TransformerBlock(d, cfg.heads) for _ in range(cfg.combiner_layers)
        )
        self.combine_norm = nn.LayerNorm(d)
        self.out_head = nn.Linear(d, cfg.speech_vocab)

    # ---- encoder side ----

    def extract(self, tokens: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        """Speech tokens (B, T) to continuous representation (B, T, D)."""
        if tokens.dim() != 2:
            raise ValueError(f"expected (B, T) tokens, got {tuple(tokens.shape)}")
        if tokens.numel() == 0:
            raise ValueError("empty token sequence")
        if (tokens < 0).any() or (tokens >= self.cfg.speech_vocab).any():
            raise ValueError(f"token id outside vocabulary [0, {self.cfg.speech_vocab})")
        x = self.token_emb(tokens) + self.extract_pos(tokens.shape[1], device=tokens.device)
        for block in self.extractor:
            x = block(x, key_padding_mask=key_padding_mask)
        return self.extract_norm(x)

    def quantize_branches(self, z: Tensor) -> dict:
        """Project and quantize both branches independently.

        Returns codes, straight-through values, and flat indices per branch.
        """
        c_codes, c_values, c_idx = self.content_fsq(self.content_proj(z))
        p_codes, p_values, p_idx = self.prompt_fsq(self.prompt_proj(z))
        return {
            "content_codes": c_codes,
            "content_values": c_values,
            "content_idx": c_idx,
            "prompt_codes": p_codes,
            "prompt_values": p_values,
            "prompt_idx": p_idx,
        }

    def encode_preferences(self, z: Tensor) -> PreferenceTokenPair:
        b = self.quantize_branches(z)
        return PreferenceTokenPair(content=b["content_idx"], prompt=b["prompt_idx"])

    @torch.no_grad()
    def encode(self, tokens: Tensor, key_padding_mask: Tensor | None = None) -> PreferenceTokenPair:
        """Deterministic eval-mode extraction + quantization, no noise."""
        was_training = self.training
        self.eval()
        try:
            pair = self.encode_preferences(self.extract(tokens, key_padding_mask))
        finally:
            self.train(was_training)
        return pair

    # ---- decoder side ----

    def combine_features(
        self,
        content_values: Tensor,
        prompt_values: Tensor,
        key_padding_mask: Tensor | None = None,
    ) -> Tensor:
        """Causal reconstruction logits (B, T, V) from branch feature streams."""
        if content_values.shape[:2] != prompt_values.shape[:2]:
            raise ValueError("content/prompt streams are not frame-aligned")
        t = content_values.shape[1]
        x = (
            self.content_in(content_values)
            + self.prompt_in(prompt_values)
            + self.combine_pos(t, device=content_values.device)
        )
        mask = causal_mask(t, device=x.device)
        for block in self.combiner:
            x = block(x, attn_mask=mask, key_padding_mask=key_padding_mask)
        return self.out_head(self.combine_norm(x))

    def combine(self, pair: PreferenceTokenPair, key_padding_mask: Tensor | None = None) -> Tensor:
        """Reconstruction logits from stored token ids (exact grid lookup)."""
        content_values = self.content_fsq.indices_to_values(pair.content)
        prompt_values = self.prompt_fsq.indices_to_values(pair.prompt)
        return self.combine_features(content_values, prompt_values, key_padding_mask)

    # ---- training ----

    def training_forward(
        self,
        tokens: Tensor,
        key_padding_mask: Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> dict:
        z = self.extract(tokens, key_padding_mask)
        if self.training and self.cfg.noise_std > 0:
            z = inject_noise(z, self.cfg.noise_std, generator)
        branches = self.quantize_branches(z)
        logits = self.combine_features(
            branches["content_values"], branches["prompt_values"], key_padding_mask
        )
        branches["logits"] = logits
        return branches


def reconstruction_loss(logits: Tensor, target: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean per-token cross-entropy; `mask` selects real (non-pad) frames."""
    if logits.shape[:-1] != target.shape:
        raise ValueError(
            f"logits {tuple(logits.shape)} do not match targets {tuple(target.shape)}"
        )
    flat_logits = logits.reshape(-1, logits.shape[-1])
    flat_target = target.reshape(-1)
    if mask is not None:
        keep = mask.reshape(-1)
        flat_logits = flat_logits[keep]
        flat_target = flat_target[keep]
    return F.cross_entropy(flat_logits, flat_target)
