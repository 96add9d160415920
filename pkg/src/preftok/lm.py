"""Autoregressive backbone plus a lightweight hierarchical decoder.

The backbone consumes instruction/content text and previously generated
speech tokens (only the speech stream is ever fed back). At each step its
hidden state enters a small causal decoder over at most three inner
positions which emits, in order, a content-preference token, a
prompt-preference token, and the speech token. Later inner positions are
fed the previous token's embedding concatenated with a projection of its
logits. Ablation switches re-wire or drop inner positions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import vocab
from .errors import ConfigError
from .layers import LearnedPositions, TransformerBlock, causal_mask

MODES = ("hierarchical", "parallel", "single_step")

CONTENT_PLACEHOLDER_OFFSET = 0  # placeholder id == vocab size, see embeddings


@dataclass(frozen=True)
class LmConfig:
    backbone_layers: int = 4
    width: int = 256
    heads: int = 4
    decoder_layers: int = 2
    content_vocab: int = 1296
    prompt_vocab: int = 64
    speech_vocab: int = 512
    decoding_mode: str = "hierarchical"
    use_content: bool = True
    use_prompt: bool = True
    mask_prob_hidden: float = 0.15
    mask_prob_prompt: float = 0.15
    aux_weight: float = 0.5
    w_content: float = 0.5
    w_prompt: float = 0.5
    w_speech: float = 1.0
    max_context: int = 1024

    def __post_init__(self):
        if self.decoding_mode not in MODES:
            raise ConfigError(f"decoding_mode must be one of {MODES}")
        for name in ("mask_prob_hidden", "mask_prob_prompt"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.width % 2 != 0:
            raise ConfigError("width must be even (inner inputs concatenate halves)")

    @property
    def eos_id(self) -> int:
        return self.speech_vocab

    def chain(self, mode: str | None = None) -> list[str]:
        """Active inner streams in decoding order."""
        if (mode or self.decoding_mode) == "single_step":
            return ["speech"]
        streams = []
        if self.use_content:
            streams.append("content")
        if self.use_prompt:
            streams.append("prompt")
        streams.append("speech")
        return streams


@dataclass(frozen=True)
class SamplingConfig:
    kind: str = "greedy"  # greedy | top_k | temperature
    top_k: int = 8
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in ("greedy", "top_k", "temperature"):
            raise ConfigError(f"unknown sampling kind {self.kind!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


@dataclass
class GenerationOutput:
    content: list[int] = field(default_factory=list)
    prompt: list[int] = field(default_factory=list)
    speech: list[int] = field(default_factory=list)  # per-step stream, includes terminator
    speech_tokens: list[int] = field(default_factory=list)  # final sequence, no terminator
    stop_reason: str = "max_len"

    def to_record(self, utt_id: str) -> dict:
        return {
            "utt_id": utt_id,
            "content": self.content,
            "prompt": self.prompt,
            "speech": self.speech,
            "stop_reason": self.stop_reason,
        }


def sample_tokens(logits: Tensor, sampling: SamplingConfig, generator=None) -> Tensor:
    if sampling.kind == "greedy":
        return logits.argmax(dim=-1)
    scaled = logits / sampling.temperature
    if sampling.kind == "top_k":
        k = min(sampling.top_k, scaled.shape[-1])
        kth = scaled.topk(k, dim=-1).values[..., -1:]
        scaled = scaled.masked_fill(scaled < kth, float("-inf"))
    probs = torch.softmax(scaled, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


class HierarchicalLm(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        w, half = cfg.width, cfg.width // 2

        self.text_emb = nn.Embedding(vocab.VOCAB_SIZE, w)
        self.speech_emb = nn.Embedding(cfg.speech_vocab + 1, w)  # +1: end-of-speech
        self.pos = LearnedPositions(cfg.max_context, w)
        self.backbone = nn.ModuleList(TransformerBlock(w, cfg.heads) for _ in range(cfg.backbone_layers))
        self.backbone_norm = nn.LayerNorm(w)

        # inner decoder; +1 embedding rows are the teacher-forcing placeholder
        # used at the end-of-speech step, where no ground-truth token exists
        self.h_in = nn.Linear(w, w)
        self.inner_pos = nn.Parameter(torch.randn(3, w) * 0.02)
        self.content_in_emb = nn.Embedding(cfg.content_vocab + 1, half)
        self.prompt_in_emb = nn.Embedding(cfg.prompt_vocab + 1, half)
        self.content_logits_proj = nn.Linear(cfg.content_vocab, half)
        self.prompt_logits_proj = nn.Linear(cfg.prompt_vocab, half)
        self.hidden_mask_vec = nn.Parameter(torch.randn(w) * 0.02)
        self.prompt_mask_vec = nn.Parameter(torch.randn(half) * 0.02)
        self.decoder = nn.ModuleList(TransformerBlock(w, cfg.heads) for _ in range(cfg.decoder_layers))
        self.decoder_norm = nn.LayerNorm(w)
        self.content_head = nn.Linear(w, cfg.content_vocab)
        self.prompt_head = nn.Linear(w, cfg.prompt_vocab)
        self.speech_head = nn.Linear(w, cfg.speech_vocab + 1)
        self.aux_head = nn.Linear(w, cfg.speech_vocab + 1)

    # ---- backbone ----

    def backbone_hidden(
        self,
        input_emb: Tensor,
        position_ids: Tensor | None = None,
        key_padding_mask: Tensor | None = None,
    ) -> Tensor:
        t = input_emb.shape[1]
        if t > self.cfg.max_context:
            raise ValueError(f"context length {t} exceeds max {self.cfg.max_context}")
        if position_ids is None:
            x = input_emb + self.pos(t, device=input_emb.device)
        else:
            x = input_emb + self.pos(position_ids)
        mask = causal_mask(t, device=x.device)
        for block in self.backbone:
            x = block(x, attn_mask=mask, key_padding_mask=key_padding_mask)
        return self.backbone_norm(x)

    def embed_context(self, text_ids: Tensor, speech_ids: Tensor | None = None) -> Tensor:
        """Text embeddings followed by speech-token embeddings, (B, Lt[+T], W)."""
        emb = self.text_emb(text_ids)
        if speech_ids is not None and speech_ids.shape[1] > 0:
            emb = torch.cat([emb, self.speech_emb(speech_ids)], dim=1)
        return emb

    def lm_hidden_step(self, text_ids: list[int], speech_prefix: list[int]) -> Tensor:
        """Hidden state for the next step given a full text and speech prefix."""
        device = next(self.parameters()).device
        text = torch.tensor([text_ids], dtype=torch.long, device=device)
        speech = torch.tensor([speech_prefix], dtype=torch.long, device=device)
        h = self.backbone_hidden(self.embed_context(text, speech))
        return h[0, -1]

    # ---- inner decoder ----

    def _inner(self, seq: Tensor) -> Tensor:
        mask = causal_mask(seq.shape[1], device=seq.device)
        x = seq
        for block in self.decoder:
            x = block(x, attn_mask=mask)
        return self.decoder_norm(x)

    def _u_hidden(self, h: Tensor) -> Tensor:
        return self.h_in(h) + self.inner_pos[0]

    def _u_token(
        self,
        stream: str,
        token: Tensor,
        logits: Tensor,
        slot: int,
        prompt_mask: Tensor | None = None,
    ) -> Tensor:
        if stream == "content":
            emb = self.content_in_emb(token)
            proj = self.content_logits_proj(logits)
        else:
            emb = self.prompt_in_emb(token)
            proj = self.prompt_logits_proj(logits)
            if prompt_mask is not None:
                emb = torch.where(prompt_mask[..., None], self.prompt_mask_vec.expand_as(emb), emb)
        return torch.cat([emb, proj], dim=-1) + self.inner_pos[slot]

    def mask_hidden(self, h: Tensor, prob: float, generator=None) -> tuple[Tensor, Tensor]:
        """Replace h rows with the learned mask vector, i.i.d. per step."""
        if not 0.0 <= prob <= 1.0:
            raise ConfigError(f"mask probability must be in [0, 1], got {prob}")
        draw = torch.rand(h.shape[:-1], device=h.device, generator=generator) < prob
        return torch.where(draw[..., None], self.hidden_mask_vec.expand_as(h), h), draw

    def draw_prompt_mask(self, shape, prob: float, device, generator=None) -> Tensor:
        if not 0.0 <= prob <= 1.0:
            raise ConfigError(f"mask probability must be in [0, 1], got {prob}")
        return torch.rand(shape, device=device, generator=generator) < prob

    # spec-facing single-stage ops (full hierarchical chain)

    def decode_content(self, h: Tensor) -> Tensor:
        """Content logits from the hidden state alone."""
        y = self._inner(self._u_hidden(h).unsqueeze(-2))
        return self.content_head(y[..., 0, :])

    def decode_prompt(self, h: Tensor, c: Tensor, c_logits: Tensor) -> Tensor:
        """Prompt logits given the hidden state and the step's content token."""
        if (c < 0).any() or (c > self.cfg.content_vocab).any():
            raise ValueError("content token out of range")
        u0 = self._u_hidden(h)
        u1 = self._u_token("content", c, c_logits, slot=1)
        y = self._inner(torch.stack([u0, u1], dim=-2))
        return self.prompt_head(y[..., 1, :])

    def decode_speech(
        self, h: Tensor, c: Tensor, p: Tensor, c_logits: Tensor, p_logits: Tensor
    ) -> Tensor:
        """Speech logits given hidden state, content and prompt tokens."""
        if (p < 0).any() or (p > self.cfg.prompt_vocab).any():
            raise ValueError("prompt token out of range")
        u0 = self._u_hidden(h)
        u1 = self._u_token("content", c, c_logits, slot=1)
        u2 = self._u_token("prompt", p, p_logits, slot=2)
        y = self._inner(torch.stack([u0, u1, u2], dim=-2))
        return self.speech_head(y[..., 2, :])

    def aux_speech_logits(self, h: Tensor) -> Tensor:
        """Auxiliary linear projection of the backbone state; training-only."""
        return self.aux_head(h)

    # ---- generic chain used by training and generation ----

    def chain_logits(
        self,
        h: Tensor,
        teacher_tokens: dict | None = None,
        sampling: SamplingConfig | None = None,
        generator=None,
        hidden_mask: Tensor | None = None,
        prompt_mask: Tensor | None = None,
        mode: str | None = None,
    ) -> tuple[dict, dict]:
        """Run the inner decoding chain over flat hidden states (N, W).

        Teacher forcing when `teacher_tokens` maps stream name to (N,) input
        ids; otherwise tokens are sampled per `sampling`. Returns
        ({stream: logits}, {stream: tokens}).
        """
        cfg = self.cfg
        mode = mode or cfg.decoding_mode
        heads = {"content": self.content_head, "prompt": self.prompt_head, "speech": self.speech_head}

        if hidden_mask is not None:
            h = torch.where(hidden_mask[..., None], self.hidden_mask_vec.expand_as(h), h)
        u0 = self._u_hidden(h)

        if mode == "single_step":
            y = self._inner(u0.unsqueeze(-2))
            s_logits = self.speech_head(y[..., 0, :])
            tokens = {}
            if sampling is not None:
                tokens["speech"] = sample_tokens(s_logits, sampling, generator)
            return {"speech": s_logits}, tokens

        if mode == "parallel":
            seq = torch.stack([u0, self.h_in(h) + self.inner_pos[1], self.h_in(h) + self.inner_pos[2]], dim=-2)
            y = self._inner(seq)
            logits = {
                "content": self.content_head(y[..., 0, :]),
                "prompt": self.prompt_head(y[..., 1, :]),
                "speech": self.speech_head(y[..., 2, :]),
            }
            tokens = {}
            if sampling is not None:
                tokens = {
                    s: sample_tokens(logits[s], sampling, generator) for s in ("content", "prompt")
                }
                tokens["speech"] = sample_tokens(logits["speech"], sampling, generator)
            return logits, tokens

        # hierarchical, possibly with dropped streams
        streams = self.cfg.chain(mode)
        seq = [u0]
        logits: dict = {}
        tokens: dict = {}
        for slot, stream in enumerate(streams):
            y = self._inner(torch.stack(seq, dim=-2))
            logits[stream] = heads[stream](y[..., slot, :])
            if stream == "speech":
                if sampling is not None:
                    tokens["speech"] = sample_tokens(logits["speech"], sampling, generator)
                break
            if teacher_tokens is not None:
                tok = teacher_tokens[stream]
            else:
                tok = sample_tokens(logits[stream], sampling, generator)
            tokens[stream] = tok
            pm = prompt_mask if stream == "prompt" else None
            seq.append(self._u_token(stream, tok, logits[stream], slot=slot + 1, prompt_mask=pm))
        return logits, tokens

    # ---- training ----

    def training_losses(self, batch: dict, generator=None) -> dict:
        """Teacher-forced per-stream cross-entropies and the weighted total."""
        cfg = self.cfg
        emb = self._batch_embeddings(batch)
        hidden = self.backbone_hidden(emb)
        idx = batch["step_index"].unsqueeze(-1).expand(-1, -1, cfg.width)
        h = hidden.gather(1, idx)  # (B, S, W)

        hidden_mask = prompt_mask = None
        if self.training and cfg.decoding_mode == "hierarchical":
            if cfg.mask_prob_hidden > 0:
                _, hidden_mask = self.mask_hidden(h, cfg.mask_prob_hidden, generator)
            if cfg.mask_prob_prompt > 0 and cfg.use_prompt:
                prompt_mask = self.draw_prompt_mask(
                    h.shape[:-1], cfg.mask_prob_prompt, h.device, generator
                )

        teacher = {"content": batch["content_in"], "prompt": batch["prompt_in"]}
        logits, _ = self.chain_logits(
            h, teacher_tokens=teacher, hidden_mask=hidden_mask, prompt_mask=prompt_mask
        )

        components: dict[str, Tensor] = {}
        weights = {"content": cfg.w_content, "prompt": cfg.w_prompt, "speech": cfg.w_speech}
        targets = {
            "content": batch["content_tgt"],
            "prompt": batch["prompt_tgt"],
            "speech": batch["speech_tgt"],
        }
        for stream, l in logits.items():
            components[stream] = stream_ce(l, targets[stream])
        if cfg.aux_weight > 0:
            components["aux"] = stream_ce(self.aux_speech_logits(h), batch["speech_tgt"])

        total = sum(
            weights.get(name, cfg.aux_weight) * ce for name, ce in components.items()
        )
        return {"total": total, "components": components}

    def _batch_embeddings(self, batch: dict) -> Tensor:
        """Mixed text/speech embeddings for right-padded training contexts."""
        text_safe = batch["ctx_text"].clamp(0, vocab.VOCAB_SIZE - 1)
        speech_safe = batch["ctx_speech"].clamp(0, self.cfg.speech_vocab)
        is_text = (batch["ctx_kind"] == 0).unsqueeze(-1)
        is_speech = (batch["ctx_kind"] == 1).unsqueeze(-1)
        emb = self.text_emb(text_safe) * is_text + self.speech_emb(speech_safe) * is_speech
        return emb

    def train_step(self, batch: dict, optimizer: torch.optim.Optimizer, generator=None) -> dict:
        """One optimization step; returns detached loss components."""
        losses = self.training_losses(batch, generator)
        optimizer.zero_grad(set_to_none=True)
        losses["total"].backward()
        optimizer.step()
        record = {"total": float(losses["total"])}
        record.update({k: float(v) for k, v in losses["components"].items()})
        return record

    # ---- generation ----

    @torch.no_grad()
    def generate_batch(
        self,
        text_ids_list: list[list[int]],
        max_len: int,
        sampling: SamplingConfig = SamplingConfig(),
        generator=None,
        mode: str | None = None,
        stop_on_eos: bool = True,
    ) -> list[GenerationOutput]:
        """Decode speech-token streams for a batch of serialized texts.

        Contexts are left-padded so every live sequence ends at the right
        edge; position ids discount the pads.
        """
        if max_len <= 0:
            raise ConfigError("max_len must be positive")
        cfg = self.cfg
        mode = mode or cfg.decoding_mode
        device = next(self.parameters()).device
        b = len(text_ids_list)
        lt = max(len(t) for t in text_ids_list)
        if lt + max_len > cfg.max_context:
            raise ValueError(
                f"context {lt}+{max_len} exceeds max context {cfg.max_context}"
            )
        ids = torch.full((b, lt), vocab.PAD, dtype=torch.long, device=device)
        pad_len = torch.zeros(b, dtype=torch.long, device=device)
        for i, t in enumerate(text_ids_list):
            pad_len[i] = lt - len(t)
            ids[i, lt - len(t):] = torch.tensor(t, dtype=torch.long, device=device)
        emb = self.text_emb(ids)
        kpm = torch.arange(lt, device=device).unsqueeze(0) < pad_len.unsqueeze(1)
        position_ids = (torch.arange(lt, device=device).unsqueeze(0) - pad_len.unsqueeze(1)).clamp(min=0)

        outs = [GenerationOutput() for _ in range(b)]
        done = torch.zeros(b, dtype=torch.bool, device=device)
        was_training = self.training
        self.eval()
        try:
            for _ in range(max_len):
                hidden = self.backbone_hidden(emb, position_ids=position_ids, key_padding_mask=kpm)
                h = hidden[:, -1]
                _, tokens = self.chain_logits(h, sampling=sampling, generator=generator, mode=mode)
                s_tok = tokens["speech"]
                for i in range(b):
                    if done[i]:
                        continue
                    for stream in ("content", "prompt"):
                        if stream in tokens:
                            getattr(outs[i], stream).append(int(tokens[stream][i]))
                    outs[i].speech.append(int(s_tok[i]))
                    if stop_on_eos and int(s_tok[i]) == cfg.eos_id:
                        done[i] = True
                        outs[i].stop_reason = "end_of_speech"
                if bool(done.all()):
                    break
                feed = torch.where(done, torch.full_like(s_tok, cfg.eos_id), s_tok).clamp(0, cfg.speech_vocab)
                emb = torch.cat([emb, self.speech_emb(feed).unsqueeze(1)], dim=1)
                next_pos = (emb.shape[1] - 1 - pad_len).unsqueeze(1)
                position_ids = torch.cat([position_ids, next_pos], dim=1)
                kpm = torch.cat([kpm, torch.zeros(b, 1, dtype=torch.bool, device=device)], dim=1)
        finally:
            self.train(was_training)
        for o in outs:
            o.speech_tokens = [t for t in o.speech if t != cfg.eos_id]
        return outs

    @torch.no_grad()
    def generate(
        self,
        text_ids: list[int],
        max_len: int,
        sampling: SamplingConfig = SamplingConfig(),
        generator=None,
        mode: str | None = None,
    ) -> GenerationOutput:
        return self.generate_batch([text_ids], max_len, sampling, generator, mode)[0]


def stream_ce(logits: Tensor, targets: Tensor) -> Tensor:
    """Cross-entropy over (B, S, V) logits with -100 padding in targets."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


def collate_training_batch(examples: list[dict], cfg: LmConfig, device=None) -> dict:
    """Pack (text_ids, content, prompt, speech) examples into padded tensors.

    Step j reads the hidden state at context position len(text)-1+j; the
    final step targets end-of-speech while its content/prompt targets are
    ignored and their teacher inputs use the placeholder embedding row.
    """
    b = len(examples)
    lens_ctx = [len(e["text_ids"]) + len(e["speech"]) for e in examples]
    l = max(lens_ctx)
    s = max(len(e["speech"]) for e in examples) + 1  # +1: end-of-speech step

    ctx_text = torch.zeros(b, l, dtype=torch.long)
    ctx_speech = torch.zeros(b, l, dtype=torch.long)
    ctx_kind = torch.full((b, l), -1, dtype=torch.long)
    step_index = torch.zeros(b, s, dtype=torch.long)
    content_in = torch.full((b, s), cfg.content_vocab, dtype=torch.long)
    prompt_in = torch.full((b, s), cfg.prompt_vocab, dtype=torch.long)
    content_tgt = torch.full((b, s), -100, dtype=torch.long)
    prompt_tgt = torch.full((b, s), -100, dtype=torch.long)
    speech_tgt = torch.full((b, s), -100, dtype=torch.long)

    for i, e in enumerate(examples):
        text, speech = e["text_ids"], e["speech"]
        lt, t = len(text), len(speech)
        if len(e["content"]) != t or len(e["prompt"]) != t:
            raise ValueError(f"misaligned target streams for example {i}")
        ctx_text[i, :lt] = torch.tensor(text)
        ctx_kind[i, :lt] = 0
        if t:
            ctx_speech[i, lt : lt + t] = torch.tensor(speech)
            ctx_kind[i, lt : lt + t] = 1
            content_in[i, :t] = torch.tensor(e["content"])
            prompt_in[i, :t] = torch.tensor(e["prompt"])
            content_tgt[i, :t] = torch.tensor(e["content"])
            prompt_tgt[i, :t] = torch.tensor(e["prompt"])
            speech_tgt[i, :t] = torch.tensor(speech)
        speech_tgt[i, t] = cfg.speech_vocab  # end-of-speech
        # steps beyond this sample clamp to its last valid position
        pos = torch.arange(s).clamp(max=t) + lt - 1
        step_index[i] = pos

    batch = {
        "ctx_text": ctx_text,
        "ctx_speech": ctx_speech,
        "ctx_kind": ctx_kind,
        "step_index": step_index,
        "content_in": content_in,
        "prompt_in": prompt_in,
        "content_tgt": content_tgt,
        "prompt_tgt": prompt_tgt,
        "speech_tgt": speech_tgt,
    }
    if device is not None:
        batch = {k: v.to(device) for k, v in batch.items()}
    return batch


def benchmark_latency(
    model: HierarchicalLm,
    text_ids_list: list[list[int]],
    modes: tuple[str, ...] = ("hierarchical", "single_step"),
    max_len: int = 32,
    sampling: SamplingConfig = SamplingConfig(),
    warmup: int = 2,
) -> dict:
    """Wall-clock per emitted speech token for each decoding mode.

    Every sequence runs exactly max_len steps (the terminator does not stop
    the loop) so all modes do identical step counts. Returns per-mode
    median/mean seconds per token and the hierarchical/single_step ratio of
    medians when both modes are present.
    """
    if not text_ids_list:
        raise ValueError("benchmark needs at least one text")
    results: dict = {"modes": {}}
    for mode in modes:
        for t in text_ids_list[:warmup]:
            model.generate(t, max_len=4, sampling=sampling, mode=mode)
        times: list[float] = []
        for t in text_ids_list:
            step_times = _timed_generation(model, t, max_len, sampling, mode)
            times.extend(step_times)
        times_t = torch.tensor(times)
        results["modes"][mode] = {
            "median_s": float(times_t.median()),
            "mean_s": float(times_t.mean()),
            "n_steps": len(times),
        }
    if "hierarchical" in results["modes"] and "single_step" in results["modes"]:
        results["latency_ratio"] = (
            results["modes"]["hierarchical"]["median_s"]
            / results["modes"]["single_step"]["median_s"]
        )
    return results


@torch.no_grad()
def _timed_generation(model, text_ids, max_len, sampling, mode) -> list[float]:
    device = next(model.parameters()).device
    cfg = model.cfg
    ids = torch.tensor([text_ids], dtype=torch.long, device=device)
    emb = model.text_emb(ids)
    times = []
    was_training = model.training
    model.eval()
    try:
        for _ in range(max_len):
            t0 = time.perf_counter()
            hidden = model.backbone_hidden(emb)
            h = hidden[:, -1]
            _, tokens = model.chain_logits(h, sampling=sampling, mode=mode)
            tok = tokens["speech"].clamp(0, cfg.speech_vocab)
            emb = torch.cat([emb, model.speech_emb(tok).unsqueeze(1)], dim=1)
            times.append(time.perf_counter() - t0)
    finally:
        model.train(was_training)
    return times
