"""
Alignment-driven span selection for text-based editing.

The original and target transcripts are diffed at word level; every edit block
is located in time through the word alignment of the original, widened by a
margin on both sides so the neighbouring words are regenerated too, and turned
into codec frame spans.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .config import EditParams
from .errors import AlignmentError, SpanError
from .logger import get_logger
from .phonemes import Lexicon, PhonemeSeq, PhonemeVocab, phonemize
from .seq_layout import SpanSet
from .validation import validate_alignment

logger = get_logger(__name__)

__all__ = [
    "AlignedWord",
    "WordAlignment",
    "EditOp",
    "EditOpList",
    "EditParams",
    "diff_transcripts",
    "plan_spans",
    "build_target_phonemes",
]

INSERT = "insert"
DELETE = "delete"
SUBSTITUTE = "substitute"

# rounding guard so e.g. 0.92 s * 50 Hz is 46 frames and not 46.000000000000007
_FRAME_DECIMALS = 6


@dataclass(frozen=True)
class AlignedWord:
    word: str
    start: float
    end: float


@dataclass(frozen=True)
class WordAlignment:
    entries: Tuple[AlignedWord, ...]

    def __post_init__(self):
        is_valid, message = validate_alignment([(e.word, e.start, e.end) for e in self.entries])
        if not is_valid:
            raise AlignmentError(message)

    def __len__(self) -> int:
        return len(self.entries)

    def words(self) -> List[str]:
        return [e.word.lower() for e in self.entries]


@dataclass(frozen=True)
class EditOp:
    """One contiguous edit block; ranges are half-open word index ranges."""

    kind: str
    orig_range: Tuple[int, int]
    target_range: Tuple[int, int]
    cost: int


@dataclass(frozen=True)
class EditOpList:
    ops: Tuple[EditOp, ...]

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    @property
    def distance(self) -> int:
        return sum(op.cost for op in self.ops)


def _edit_table(a: Sequence[str], b: Sequence[str]) -> List[List[int]]:
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        table[i][0] = i
    for j in range(m + 1):
        table[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = a[i - 1] == b[j - 1]
            table[i][j] = min(
                table[i - 1][j - 1] + (0 if same else 1),
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
            )
    return table


def diff_transcripts(orig_words: Sequence[str], target_words: Sequence[str]) -> EditOpList:
    """Minimal word-level edit script, grouped into contiguous blocks.

    Backtracking prefers matches, then substitutions, then deletions; taken
    from the end of the sequences this leaves edits as far left as possible.
    """
    a = [w.lower() for w in orig_words]
    b = [w.lower() for w in target_words]
    table = _edit_table(a, b)

    steps = []  # (op, i, j) with i, j the indices before the step
    i, j = len(a), len(b)
    while i > 0 or j > 0:
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and table[i][j] == table[i - 1][j - 1]:
            steps.append(("match", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and table[i][j] == table[i - 1][j - 1] + 1:
            steps.append((SUBSTITUTE, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and table[i][j] == table[i - 1][j] + 1:
            steps.append((DELETE, i - 1, j))
            i -= 1
        else:
            steps.append((INSERT, i, j - 1))
            j -= 1
    steps.reverse()

    ops: List[EditOp] = []
    block = None
    for op, oi, tj in steps:
        if op == "match":
            if block is not None:
                ops.append(_close_block(*block))
                block = None
            continue
        o_next = oi + (0 if op == INSERT else 1)
        t_next = tj + (0 if op == DELETE else 1)
        if block is None:
            block = [oi, o_next, tj, t_next, 1]
        else:
            block[1], block[3], block[4] = o_next, t_next, block[4] + 1
    if block is not None:
        ops.append(_close_block(*block))
    return EditOpList(tuple(ops))


def _close_block(o0: int, o1: int, t0: int, t1: int, cost: int) -> EditOp:
    if o0 == o1:
        kind = INSERT
    elif t0 == t1:
        kind = DELETE
    else:
        kind = SUBSTITUTE
    return EditOp(kind, (o0, o1), (t0, t1), cost)


def _op_interval(align: WordAlignment, op: EditOp, total_seconds: float) -> Tuple[float, float]:
    o0, o1 = op.orig_range
    n = len(align)
    if o1 > o0:
        if o1 > n:
            raise AlignmentError(f"Edit touches word {o1 - 1} but the alignment has {n} words")
        return align.entries[o0].start, align.entries[o1 - 1].end
    if o0 > n:
        raise AlignmentError(f"Insertion point {o0} is past the {n} aligned words")
    if o0 == 0:
        anchor = 0.0
    elif o0 == n:
        anchor = total_seconds
    else:
        anchor = 0.5 * (align.entries[o0 - 1].end + align.entries[o0].start)
    return anchor, anchor


def plan_spans(align: WordAlignment, ops: EditOpList, p: EditParams, num_frames: int) -> SpanSet:
    """Frame spans to regenerate: each edit block widened by ``alpha`` and rounded outward."""
    if num_frames < 1:
        raise SpanError("Need at least one frame to plan spans")
    total_seconds = num_frames / p.frame_rate
    raw = []
    for op in ops:
        start, end = _op_interval(align, op, total_seconds)
        first = math.floor(round((start - p.alpha) * p.frame_rate, _FRAME_DECIMALS))
        last = math.ceil(round((end + p.alpha) * p.frame_rate, _FRAME_DECIMALS)) - 1
        first = min(max(first, 0), num_frames - 1)
        last = min(max(last, first), num_frames - 1)
        raw.append((first, last))

    merged: List[Tuple[int, int]] = []
    for start, end in sorted(raw):
        if merged and start <= merged[-1][1] + 1:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    if len(merged) > p.max_spans:
        raise SpanError(f"Edit needs {len(merged)} spans but at most {p.max_spans} are supported")
    logger.debug("Planned spans %s from %s edit blocks", merged, len(ops))
    return SpanSet(tuple(merged))


def build_target_phonemes(target_transcript: str, lexicon: Lexicon, vocab: PhonemeVocab) -> PhonemeSeq:
    return PhonemeSeq(vocab.encode(phonemize(target_transcript, lexicon)))
