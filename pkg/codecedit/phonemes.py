"""Lexicon-driven phonemization with a per-character fallback."""

import string
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import VocabularyError
from .logger import get_logger

logger = get_logger(__name__)

PAD = "<pad>"
UNK = "<unk>"
BOUNDARY = "|"
SPECIAL_SYMBOLS = (PAD, BOUNDARY, UNK)

FALLBACK_SYMBOLS = tuple(string.ascii_lowercase + string.digits + "'")


def tokenize_transcript(text: str) -> List[str]:
    """Whitespace split with lowercase folding."""
    return text.lower().split()


@dataclass(frozen=True)
class Lexicon:
    entries: Mapping[str, Tuple[str, ...]]

    def lookup(self, word: str) -> Tuple[str, ...]:
        word = word.lower()
        if word in self.entries:
            return tuple(self.entries[word])
        logger.warning("No lexicon entry for %r, using characters", word)
        return tuple(ch for ch in word)

    def symbols(self) -> List[str]:
        return sorted({s for symbols in self.entries.values() for s in symbols})


def phonemize(transcript: str, lexicon: Lexicon) -> List[str]:
    words = tokenize_transcript(transcript)
    if not words:
        raise VocabularyError("Cannot phonemize an empty transcript")
    out: List[str] = []
    for i, word in enumerate(words):
        if i:
            out.append(BOUNDARY)
        out.extend(lexicon.lookup(word))
    return out


@dataclass(frozen=True)
class PhonemeVocab:
    """Symbol <-> id table. Ids below ``num_special`` are pad/boundary/unk."""

    symbols: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.symbols[:len(SPECIAL_SYMBOLS)] != SPECIAL_SYMBOLS:
            raise VocabularyError("Phoneme vocabulary must start with the special symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabularyError("Duplicate phoneme symbols")
        object.__setattr__(self, "index", {s: i for i, s in enumerate(self.symbols)})

    @classmethod
    def build(cls, lexicon_symbols: Iterable[str]) -> "PhonemeVocab":
        regular = sorted(set(lexicon_symbols) | set(FALLBACK_SYMBOLS))
        regular = [s for s in regular if s not in SPECIAL_SYMBOLS]
        return cls(SPECIAL_SYMBOLS + tuple(regular))

    @property
    def num_special(self) -> int:
        return len(SPECIAL_SYMBOLS)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, symbols: Sequence[str]) -> np.ndarray:
        unk = self.index[UNK]
        return np.asarray([self.index.get(s, unk) for s in symbols], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.symbols[int(i)] for i in ids]


@dataclass(frozen=True)
class PhonemeSeq:
    ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise VocabularyError("A phoneme sequence needs at least one id")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.ids.size)

    def check_vocab(self, vocab_size: int) -> None:
        if self.ids.min() < 0 or self.ids.max() >= vocab_size:
            raise VocabularyError(f"Phoneme id outside vocabulary of size {vocab_size}")
