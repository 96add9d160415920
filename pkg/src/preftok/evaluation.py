"""Evaluation metrics over persisted generation records and codec features.

Every metric here is a pure function of files plus checkpoints: generation
records are written once, and scores can be recomputed from them alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import vocab, world
from .codec import PreferenceCodec
from .heads import ClapHead, prompt_text_embed_batch


@dataclass
class EvalReport:
    reconstruction_accuracy: float | None = None
    token_error_rate: float | None = None
    style_accuracy: float | None = None
    style_probe_acc_prompt_branch: float | None = None
    style_probe_acc_content_branch: float | None = None
    retrieval_acc: float | None = None
    latency_ratio: float | None = None
    n_generated: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def validate_rates(self) -> None:
        for name, v in self.to_dict().items():
            if name in ("latency_ratio", "n_generated") or v is None:
                continue
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def edit_distance(a: str, b: str) -> int:
    """Plain Levenshtein distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def token_error_rate(decoded: str, target: str) -> float:
    """Normalized edit distance, clipped to [0, 1]."""
    if not target:
        return 0.0 if not decoded else 1.0
    return min(1.0, edit_distance(decoded, target) / len(target))


@torch.no_grad()
def branch_features(
    codec: PreferenceCodec, utts: list[world.ToyUtterance], batch_size: int = 64
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-utterance dequantized branch features (content, prompt), eval mode."""
    codec.eval()
    content, prompt = [], []
    for lo in range(0, len(utts), batch_size):
        chunk = utts[lo : lo + batch_size]
        tokens, kpm, lengths = pad_token_batch([u.speech for u in chunk])
        z = codec.extract(tokens, key_padding_mask=kpm)
        b = codec.quantize_branches(z)
        for i, n in enumerate(lengths):
            content.append(b["content_values"][i, :n].numpy())
            prompt.append(b["prompt_values"][i, :n].numpy())
    return content, prompt


def pad_token_batch(seqs: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor, list[int]]:
    lengths = [len(s) for s in seqs]
    t = max(lengths)
    tokens = torch.zeros(len(seqs), t, dtype=torch.long)
    kpm = torch.ones(len(seqs), t, dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        kpm[i, : len(s)] = False
    return tokens, kpm, lengths


@torch.no_grad()
def reconstruction_accuracy(
    codec: PreferenceCodec, utts: list[world.ToyUtterance], batch_size: int = 64
) -> float:
    """Fraction of tokens reproduced by greedy combine(encode(x))."""
    codec.eval()
    hit = total = 0
    for lo in range(0, len(utts), batch_size):
        chunk = utts[lo : lo + batch_size]
        tokens, kpm, lengths = pad_token_batch([u.speech for u in chunk])
        pair = codec.encode(tokens, key_padding_mask=kpm)
        pred = codec.combine(pair, key_padding_mask=kpm).argmax(dim=-1)
        for i, n in enumerate(lengths):
            hit += int((pred[i, :n] == tokens[i, :n]).sum())
            total += n
    return hit / max(1, total)


@torch.no_grad()
def retrieval_accuracy(
    codec: PreferenceCodec,
    clap: ClapHead,
    utts: list[world.ToyUtterance],
    templates: list[str],
    batch_size: int = 64,
) -> float:
    """Fraction of utterances whose pooled prompt-branch embedding is closest
    to the text embedding of its true prompt template."""
    codec.eval()
    clap.eval()
    text_emb = prompt_text_embed_batch(list(templates))  # (n_styles, E)
    hits = 0
    for lo in range(0, len(utts), batch_size):
        chunk = utts[lo : lo + batch_size]
        tokens, kpm, _ = pad_token_batch([u.speech for u in chunk])
        z = codec.extract(tokens, key_padding_mask=kpm)
        feats = codec.quantize_branches(z)["prompt_values"]
        emb = clap(feats, key_padding_mask=kpm)  # (B, E) unit norm
        sims = emb @ text_emb.t()
        pred = sims.argmax(dim=-1)
        for i, u in enumerate(chunk):
            hits += int(pred[i]) == u.style_id
    return hits / max(1, len(utts))


def probe_disentanglement(
    codec: PreferenceCodec,
    train_utts: list[world.ToyUtterance],
    test_utts: list[world.ToyUtterance],
    seed: int = 0,
) -> dict:
    """Linear style probes on mean-pooled frozen branch features.

    Fits one logistic-regression classifier per branch on the train split
    and reports held-out accuracy for both.
    """
    from sklearn.linear_model import LogisticRegression

    def pooled(utts):
        content, prompt = branch_features(codec, utts)
        c = np.stack([f.mean(axis=0) for f in content])
        p = np.stack([f.mean(axis=0) for f in prompt])
        y = np.array([u.style_id for u in utts])
        return c, p, y

    c_tr, p_tr, y_tr = pooled(train_utts)
    c_te, p_te, y_te = pooled(test_utts)
    if len(set(y_tr.tolist())) < 2:
        raise ValueError("probe needs at least two style classes")
    accs = {}
    for name, (tr, te) in {"content": (c_tr, c_te), "prompt": (p_tr, p_te)}.items():
        clf = LogisticRegression(max_iter=2000, random_state=seed)
        clf.fit(tr, y_tr)
        accs[f"{name}_probe_acc"] = float((clf.predict(te) == y_te).mean())
    return accs


def generation_metrics(
    records: list[dict],
    utts_by_id: dict[str, world.ToyUtterance],
    table: np.ndarray,
    base_units: int,
    units_per_char: int,
    speech_vocab: int,
) -> tuple[float, float]:
    """(token_error_rate, style_accuracy) from generation records.

    Speech streams may carry the terminator id and arbitrary lengths; frames
    beyond the last full character group are dropped before text inversion.
    """
    ters, style_hits = [], []
    for rec in records:
        utt = utts_by_id[rec["utt_id"]]
        speech = [t for t in rec["speech"] if 0 <= t < speech_vocab]
        if speech:
            style_hits.append(world.oracle_style_of(speech, base_units) == utt.style_id)
        else:
            style_hits.append(False)
        usable = len(speech) - len(speech) % units_per_char
        decoded = world.oracle_text_of(speech[:usable], table, base_units) if usable else ""
        ters.append(token_error_rate(decoded, utt.content_text))
    return float(np.mean(ters)), float(np.mean(style_hits))


def write_records(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_records(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f]
