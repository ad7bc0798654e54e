"""Fixed character-level vocabulary.

Letters (both cases for the prompt-format casing variants), digits, the
punctuation the synthetic tasks and the mini program language need, plus
PAD/BOS/EOS. No external tokenizer, no training: the mapping is frozen so
datasets and checkpoints stay mutually compatible forever.
"""

from __future__ import annotations

from skillmerge.errors import ContractError

_CHARS = (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "0123456789"
    " .,:;#=()+-*/?\n"
)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2

_CHAR_TO_ID = {c: i + 3 for i, c in enumerate(_CHARS)}
_ID_TO_CHAR = {i: c for c, i in _CHAR_TO_ID.items()}

VOCAB_SIZE = len(_CHARS) + 3


def encode(text: str) -> list[int]:
    """Character ids (without BOS/EOS). Unknown characters are an error."""
    try:
        return [_CHAR_TO_ID[c] for c in text]
    except KeyError as exc:
        raise ContractError(f"character {exc.args[0]!r} is outside the fixed vocabulary") from exc


def decode(ids: list[int] | tuple[int, ...]) -> str:
    """Back to text; PAD/BOS/EOS are dropped."""
    return "".join(_ID_TO_CHAR[i] for i in ids if i in _ID_TO_CHAR)


def encodable(text: str) -> bool:
    return all(c in _CHAR_TO_ID for c in text)
