"""Overlapping amino-acid n-grams and the vocabulary that numbers them."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import AlphabetError, ContractError, SequenceTooShortError, VocabError

logger = logging.getLogger(__name__)

STANDARD_RESIDUES = "ACDEFGHIKLMNPQRSTVWY"
AMBIGUITY_CODES = "BJXZ"
ALPHABET = frozenset(STANDARD_RESIDUES + AMBIGUITY_CODES)
PAD_ID = 0
UNK_ID = 1
VOCAB_FORMAT_VERSION = 1


def clean_sequence(seq: str) -> str:
    """Uppercase and drop stop symbols and alignment gaps."""
    return seq.upper().replace("*", "").replace("-", "").strip()


def check_alphabet(seq: str) -> None:
    for i, ch in enumerate(seq):
        if ch not in ALPHABET:
            raise AlphabetError(ch, i)


def extract_ngrams(seq: str, n: int = 3) -> list[str]:
    seq = clean_sequence(seq)
    check_alphabet(seq)
    if len(seq) < n:
        raise SequenceTooShortError(len(seq), n)
    return [seq[i:i + n] for i in range(len(seq) - n + 1)]


@dataclass(frozen=True)
class TrigramVocab:
    """Token <-> id mapping; ids 0 and 1 are padding and unknown."""

    tokens: tuple[str, ...]
    n: int = 3
    token_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {tok: i + 2 for i, tok in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        for tok in self.tokens:
            if len(tok) != self.n or not set(tok) <= ALPHABET:
                raise VocabError(f"invalid token {tok!r} for n={self.n}")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        """Number of ids including the two reserved ones."""
        return len(self.tokens) + 2

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str], max_len: int) -> list[int]:
        return encode(tokens, self, max_len)

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == PAD_ID:
                continue
            out.append("<unk>" if i == UNK_ID else self.tokens[i - 2])
        return out

    def to_json(self) -> str:
        return json.dumps({"version": VOCAB_FORMAT_VERSION, "n": self.n,
                           "tokens": list(self.tokens)})

    @classmethod
    def from_json(cls, text: str) -> "TrigramVocab":
        doc = json.loads(text)
        if doc.get("version") != VOCAB_FORMAT_VERSION:
            raise VocabError(f"unsupported vocab version {doc.get('version')!r}")
        return cls(tuple(doc["tokens"]), n=int(doc["n"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrigramVocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def build_vocab(corpus: Iterable[Sequence[str]], n: int = 3) -> TrigramVocab:
    """Number tokens by first occurrence. Pass training-fold sequences only."""
    seen: dict[str, None] = {}
    empty = True
    for tokens in corpus:
        empty = False
        for tok in tokens:
            seen.setdefault(tok, None)
    if empty or not seen:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    return TrigramVocab(tuple(seen), n=n)


def encode(tokens: Sequence[str], vocab: TrigramVocab, max_len: int) -> list[int]:
    if max_len < 1:
        raise ContractError(f"max_len must be >= 1, got {max_len}")
    if len(tokens) > max_len:
        logger.debug("truncating %d tokens to %d", len(tokens), max_len)
    ids = [vocab.id_of(t) for t in tokens[:max_len]]
    return ids + [PAD_ID] * (max_len - len(ids))
