"""Character-level text vocabulary shared by the ASR head and the token LM.

Plain lowercase characters plus a handful of special ids. Instruction and
content text serialize as: instruction chars, SEP, content chars, BOS_SPEECH.
"""

from __future__ import annotations

CHARS = "abcdefghijklmnopqrstuvwxyz "

PAD = len(CHARS)          # 27
BOS = len(CHARS) + 1      # 28, text-decoder start
EOS = len(CHARS) + 2      # 29, text-decoder end
SEP = len(CHARS) + 3      # 30, instruction / content separator
BOS_SPEECH = len(CHARS) + 4  # 31, begin-of-speech marker

VOCAB_SIZE = len(CHARS) + 5

_CHAR_TO_ID = {c: i for i, c in enumerate(CHARS)}


def encode_chars(text: str) -> list[int]:
    """Map a string to char ids; rejects anything outside the vocabulary."""
    try:
        return [_CHAR_TO_ID[c] for c in text]
    except KeyError as e:
        raise ValueError(f"character {e.args[0]!r} not in vocabulary") from None


def decode_chars(ids: list[int]) -> str:
    """Inverse of :func:`encode_chars`; special ids are dropped."""
    return "".join(CHARS[i] for i in ids if 0 <= i < len(CHARS))


def encode_prompt_and_text(instruction: str, content_text: str) -> list[int]:
    """Serialize an (instruction, content) pair for the LM context."""
    return encode_chars(instruction) + [SEP] + encode_chars(content_text) + [BOS_SPEECH]
