"""Synthetic utterance world with exact oracles.

Speech tokens are built as ``style_id * base_units + unit`` where the unit
stream is a fixed per-character lookup, so style lives in the high digits
and content in the low digits. Both factors are recoverable exactly, which
turns every downstream claim into a checkable property.

All randomness comes from counter-based Philox streams so corpora are
reproducible across platforms. Stream keys are two 64-bit words
``[seed, stream]`` with stream 0 reserved for the unit table and stream
``index + 1`` for utterance ``index``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError
from .vocab import CHARS

NOMINAL_FRAME_RATE_HZ = 25

STREAM_UNIT_TABLE = 0
STREAM_UTTERANCE_BASE = 1

MIN_TEXT_LEN = 4
MAX_TEXT_LEN = 24

FAILURE_CHAR = "?"


def _philox(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


def load_prompt_templates() -> list[str]:
    """Fixed prompt text per style id, from the packaged resource file."""
    text = resources.files("preftok.resources").joinpath("prompt_templates.txt").read_text("utf-8")
    return [line for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class WorldConfig:
    n_styles: int = 8
    base_units: int = 64
    units_per_char: int = 2
    noise_rate: float = 0.02
    seed: int = 0
    templates: tuple[str, ...] = field(default_factory=lambda: tuple(load_prompt_templates()))

    @property
    def speech_vocab_size(self) -> int:
        return self.n_styles * self.base_units

    def __post_init__(self):
        if len(self.templates) < self.n_styles:
            raise ValueError(f"need {self.n_styles} prompt templates, got {len(self.templates)}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")


@dataclass(frozen=True)
class ToyUtterance:
    utt_id: str
    content_text: str
    style_id: int
    prompt_text: str
    speech: list[int]

    def to_record(self) -> dict:
        return {
            "utt_id": self.utt_id,
            "text": self.content_text,
            "style_id": self.style_id,
            "prompt": self.prompt_text,
            "speech": self.speech,
        }

    @staticmethod
    def from_record(rec: dict) -> "ToyUtterance":
        return ToyUtterance(
            utt_id=rec["utt_id"],
            content_text=rec["text"],
            style_id=int(rec["style_id"]),
            prompt_text=rec["prompt"],
            speech=[int(t) for t in rec["speech"]],
        )


def make_unit_table(cfg: WorldConfig) -> np.ndarray:
    """Per-character unit rows, shape (|chars|, units_per_char), values < base_units."""
    rng = _philox(cfg.seed, STREAM_UNIT_TABLE)
    return rng.integers(0, cfg.base_units, size=(len(CHARS), cfg.units_per_char))


def char_to_units(c: str, table: np.ndarray) -> list[int]:
    """Deterministic unit row for one character."""
    idx = CHARS.find(c)
    if idx < 0:
        raise ValueError(f"character {c!r} not in vocabulary")
    return [int(u) for u in table[idx]]


def sample_utterance(index: int, cfg: WorldConfig, table: np.ndarray) -> ToyUtterance:
    """One utterance from the generative process, keyed by (seed, index)."""
    rng = _philox(cfg.seed, STREAM_UTTERANCE_BASE + index)
    length = int(rng.integers(MIN_TEXT_LEN, MAX_TEXT_LEN + 1))
    char_ids = rng.integers(0, len(CHARS), size=length)
    text = "".join(CHARS[i] for i in char_ids)
    style = int(rng.integers(0, cfg.n_styles))
    units = table[char_ids].reshape(-1)
    tokens = style * cfg.base_units + units
    corrupt = rng.random(tokens.shape[0]) < cfg.noise_rate
    if corrupt.any():
        tokens = tokens.copy()
        tokens[corrupt] = rng.integers(0, cfg.speech_vocab_size, size=int(corrupt.sum()))
    return ToyUtterance(
        utt_id=f"utt-{index:06d}",
        content_text=text,
        style_id=style,
        prompt_text=cfg.templates[style],
        speech=[int(t) for t in tokens],
    )


def oracle_style_of(speech: list[int] | np.ndarray, base_units: int = 64) -> int:
    """Majority vote over per-frame high digits; ties go to the lowest style."""
    tokens = np.asarray(speech)
    if tokens.size == 0:
        raise ValueError("empty speech sequence")
    return int(np.bincount(tokens // base_units).argmax())


def oracle_text_of(
    speech: list[int] | np.ndarray,
    table: np.ndarray,
    base_units: int = 64,
) -> str:
    """Invert the unit stream back to text, per character.

    Exact table matches win; otherwise the row with the fewest mismatched
    units is taken, and ambiguous rows decode to the failure marker.
    """
    tokens = np.asarray(speech)
    upc = table.shape[1]
    if tokens.size % upc != 0:
        raise ValueError(f"speech length {tokens.size} not divisible by {upc}")
    units = (tokens % base_units).reshape(-1, upc)
    out = []
    for row in units:
        dist = (table != row).sum(axis=1)
        best = dist.min()
        hits = np.flatnonzero(dist == best)
        out.append(CHARS[hits[0]] if len(hits) == 1 else FAILURE_CHAR)
    return "".join(out)


def _dump_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n"


def split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n into train/dev/test."""
    total = sum(ratios)
    raw = [n * r / total for r in ratios]
    counts = [int(x) for x in raw]
    for _ in range(n - sum(counts)):
        fracs = [x - c for x, c in zip(raw, counts)]
        counts[fracs.index(max(fracs))] += 1
    return counts[0], counts[1], counts[2]


def make_corpus(
    n: int,
    cfg: WorldConfig,
    out_dir: str | Path,
    ratios: tuple[float, float, float] = (20.0, 1.0, 1.0),
) -> dict:
    """Generate and persist a train/dev/test corpus; returns summary counts.

    Deterministic in (n, cfg): the same arguments produce byte-identical
    files. The default ratios place 10000/500/500 utterances at n=11000.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = make_unit_table(cfg)
    n_train, n_dev, n_test = split_counts(n, ratios)
    bounds = {
        "train": (0, n_train),
        "dev": (n_train, n_train + n_dev),
        "test": (n_train + n_dev, n),
    }
    counts = {}
    try:
        for split, (lo, hi) in bounds.items():
            with open(out / f"{split}.jsonl", "w", encoding="utf-8") as f:
                for i in range(lo, hi):
                    f.write(_dump_record(sample_utterance(i, cfg, table).to_record()))
            counts[split] = hi - lo
        with open(out / "unit_table.json", "w", encoding="utf-8") as f:
            f.write(json.dumps({"chars": CHARS, "table": table.tolist()}, sort_keys=True))
        with open(out / "world.json", "w", encoding="utf-8") as f:
            f.write(json.dumps(world_config_dict(cfg), sort_keys=True, indent=2))
    except OSError as e:
        raise DataError(f"failed writing corpus to {out}: {e}") from e
    return counts


def world_config_dict(cfg: WorldConfig) -> dict:
    return {
        "n_styles": cfg.n_styles,
        "base_units": cfg.base_units,
        "units_per_char": cfg.units_per_char,
        "noise_rate": cfg.noise_rate,
        "seed": cfg.seed,
        "templates": list(cfg.templates),
    }


def load_world_config(corpus_dir: str | Path) -> WorldConfig:
    path = Path(corpus_dir) / "world.json"
    if not path.exists():
        raise DataError(f"no world.json under {corpus_dir}; run gen-data first")
    d = json.loads(path.read_text("utf-8"))
    d["templates"] = tuple(d["templates"])
    return WorldConfig(**d)


def load_unit_table(corpus_dir: str | Path) -> np.ndarray:
    path = Path(corpus_dir) / "unit_table.json"
    if not path.exists():
        raise DataError(f"no unit_table.json under {corpus_dir}")
    return np.asarray(json.loads(path.read_text("utf-8"))["table"])


def load_split(corpus_dir: str | Path, split: str) -> list[ToyUtterance]:
    path = Path(corpus_dir) / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"missing corpus split {path}")
    with open(path, encoding="utf-8") as f:
        return [ToyUtterance.from_record(json.loads(line)) for line in f]
