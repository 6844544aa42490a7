"""Character-level vocabulary with the instruction special-token lexicon.

Plain text is tokenized one character per id, which keeps the round trip
``detokenize(tokenize(t)) == t`` exact.  The ``<inst-placeholder>`` glyph
maps to a single id; at batch-assembly time that id is expanded into an
``<inst-start>`` ... ``<inst-end>`` bracket around the projected code rows.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

from .errors import IntegrityError
from .specials import (
    BOS,
    EOS,
    INST_CODE,
    INST_END,
    INST_PLACEHOLDER,
    INST_START,
    PAD,
    SPECIAL_GLYPHS,
)

# Unknown characters are replaced by this glyph (documented escape policy).
REPLACEMENT_CHAR = "?"

_DEFAULT_CHARS = string.ascii_letters + string.digits + string.punctuation + " \n\t"


@dataclass(frozen=True)
class Vocab:
    tokens: dict[str, int] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "Vocab":
        tokens: dict[str, int] = {}
        for glyph in SPECIAL_GLYPHS:
            tokens[glyph] = len(tokens)
        for ch in _DEFAULT_CHARS:
            tokens[ch] = len(tokens)
        return cls(tokens=tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __post_init__(self):
        special_ids = [self.tokens.get(g) for g in SPECIAL_GLYPHS]
        if None in special_ids or len(set(special_ids)) != len(SPECIAL_GLYPHS):
            raise IntegrityError("vocabulary must contain all distinct special tokens")

    @property
    def pad_id(self) -> int:
        return self.tokens[PAD]

    @property
    def bos_id(self) -> int:
        return self.tokens[BOS]

    @property
    def eos_id(self) -> int:
        return self.tokens[EOS]

    @property
    def inst_start_id(self) -> int:
        return self.tokens[INST_START]

    @property
    def inst_end_id(self) -> int:
        return self.tokens[INST_END]

    @property
    def inst_code_id(self) -> int:
        return self.tokens[INST_CODE]

    @property
    def placeholder_id(self) -> int:
        return self.tokens[INST_PLACEHOLDER]

    def id_to_token(self) -> dict[int, str]:
        return {i: t for t, i in self.tokens.items()}

    def encode_text(self, text: str) -> list[int]:
        """Character ids for a text, with the placeholder glyph collapsed to
        its single id and unknown characters escaped to the replacement."""
        ids: list[int] = []
        i = 0
        while i < len(text):
            if text.startswith(INST_PLACEHOLDER, i):
                ids.append(self.placeholder_id)
                i += len(INST_PLACEHOLDER)
                continue
            ch = text[i]
            if ch not in self.tokens:
                ch = REPLACEMENT_CHAR
            ids.append(self.tokens[ch])
            i += 1
        return ids

    def decode_ids(self, ids: list[int]) -> str:
        """Text for a sequence of ids; pad/bos/eos are dropped, other special
        ids render as their glyphs."""
        rev = self.id_to_token()
        skip = {self.pad_id, self.bos_id, self.eos_id}
        return "".join(rev[i] for i in ids if i not in skip)


def tokenize_instruction_text(text: str, vocab: Vocab) -> list[int]:
    """Ids for a text, wrapped in bos/eos."""
    return [vocab.bos_id] + vocab.encode_text(text) + [vocab.eos_id]


def detokenize(ids: list[int], vocab: Vocab) -> str:
    return vocab.decode_ids(ids)


def expand_placeholder(ids: list[int], vocab: Vocab, code_len: int) -> tuple[list[int], int]:
    """Replace the single placeholder id with inst_start + code_len slots +
    inst_end; returns the new id list and the offset of the first code slot.

    The code slots carry the placeholder id so the array stays rectangular;
    they are never targets and are overwritten by projected code rows.
    """
    positions = [i for i, t in enumerate(ids) if t == vocab.placeholder_id]
    if len(positions) != 1:
        raise IntegrityError(
            f"expected exactly one placeholder, found {len(positions)}"
        )
    at = positions[0]
    expanded = (
        ids[:at]
        + [vocab.inst_start_id]
        + [vocab.placeholder_id] * code_len
        + [vocab.inst_end_id]
        + ids[at + 1:]
    )
    return expanded, at + 1
