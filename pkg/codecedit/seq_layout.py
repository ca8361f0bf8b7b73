"""
Token layout for masked-span modelling.

A T x K code grid with P masked spans becomes

    [sos] C_0 [m_1] C_1 ... [m_P] C_P [eos] [m_1] M_1 [eog] ... [m_P] M_P [eog]

where C_i are the unmasked (context) segments and M_p the masked span contents.
Special tokens fill all K channels with the same id. The grid is then
delay-stacked so channel k lags k steps behind channel 0.
"""

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .codec import CodeGrid
from .errors import LayoutError, SpanError
from .validation import validate_span_pairs

MAX_MASK_FRACTION = 0.9
MIN_FRAMES = 10


class Role(IntEnum):
    CONTEXT = 0
    MASKED = 1
    SPECIAL = 2


@dataclass(frozen=True)
class SpecialVocab:
    """Special ids live above the codec vocabulary: [V, V + 3 + max_spans + 1)."""

    codebook_size: int
    max_spans: int = 3

    @property
    def sos(self) -> int:
        return self.codebook_size

    @property
    def eos(self) -> int:
        return self.codebook_size + 1

    @property
    def eog(self) -> int:
        return self.codebook_size + 2

    def mask(self, p: int) -> int:
        """Id of marker [m_p], p counted from 1."""
        if not 1 <= p <= self.max_spans:
            raise LayoutError(f"Mask marker m_{p} outside 1..{self.max_spans}")
        return self.codebook_size + 2 + p

    @property
    def pad(self) -> int:
        return self.codebook_size + 3 + self.max_spans

    @property
    def size(self) -> int:
        return self.codebook_size + 3 + self.max_spans + 1

    def mask_index(self, token: int) -> Optional[int]:
        p = token - self.codebook_size - 2
        return p if 1 <= p <= self.max_spans else None

    def is_code(self, token: int) -> bool:
        return 0 <= token < self.codebook_size


@dataclass(frozen=True)
class SpanSet:
    """Sorted, disjoint, non-adjacent inclusive (start, end) frame spans."""

    spans: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        spans = tuple((int(s), int(e)) for s, e in self.spans)
        is_valid, message = validate_span_pairs(spans, num_frames=2 ** 62)
        if not is_valid:
            raise SpanError(message)
        object.__setattr__(self, "spans", spans)

    def __len__(self) -> int:
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    @property
    def total_frames(self) -> int:
        return sum(e - s + 1 for s, e in self.spans)

    def check(self, num_frames: int) -> None:
        is_valid, message = validate_span_pairs(self.spans, num_frames)
        if not is_valid:
            raise SpanError(message)

    def frame_mask(self, num_frames: int) -> np.ndarray:
        self.check(num_frames)
        mask = np.zeros(num_frames, dtype=bool)
        for s, e in self.spans:
            mask[s:e + 1] = True
        return mask


@dataclass(frozen=True)
class RearrangedSeq:
    tokens: np.ndarray      # (T', K)
    roles: np.ndarray       # (T',) Role values
    span_index: np.ndarray  # (T',) 0-based span id, -1 for none
    num_frames: int
    spans: SpanSet

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def sample_spans(num_frames: int, rng: np.random.Generator, max_spans: int = 3) -> SpanSet:
    """P ~ U{1..max_spans} disjoint spans covering at most 90% of the frames.

    Lengths are drawn uniformly then rescaled under the cap; spans keep at least
    one unmasked frame between them and may touch either end of the utterance.
    """
    if num_frames < MIN_FRAMES:
        raise SpanError(f"Need at least {MIN_FRAMES} frames to sample spans, got {num_frames}")
    num_spans = int(rng.integers(1, max_spans + 1))
    budget = min(math.floor(MAX_MASK_FRACTION * num_frames), num_frames - (num_spans - 1))
    if budget < num_spans:
        raise SpanError(f"{num_frames} frames cannot hold {num_spans} spans")

    lengths = rng.integers(1, budget + 1, size=num_spans)
    if lengths.sum() > budget:
        lengths = np.maximum(1, np.floor(lengths * budget / lengths.sum()).astype(np.int64))
        while lengths.sum() > budget:
            lengths[int(np.argmax(lengths))] -= 1

    # spread the unmasked frames over num_spans + 1 gaps (inner gaps keep one frame)
    slack = num_frames - int(lengths.sum()) - (num_spans - 1)
    cuts = np.sort(rng.choice(slack + num_spans, size=num_spans, replace=False))
    gaps = np.diff(np.concatenate([[-1], cuts])) - 1

    spans = []
    cursor = 0
    for p in range(num_spans):
        cursor += int(gaps[p]) + (1 if p else 0)
        spans.append((cursor, cursor + int(lengths[p]) - 1))
        cursor += int(lengths[p])
    return SpanSet(tuple(spans))


def sample_continuation_span(num_frames: int, rng: np.random.Generator, prob: float = 0.5) -> Optional[SpanSet]:
    """With probability ``prob`` mask the tail: one span ending at the last frame."""
    if num_frames < MIN_FRAMES:
        raise SpanError(f"Need at least {MIN_FRAMES} frames, got {num_frames}")
    if rng.random() >= prob:
        return None
    start = int(rng.integers(math.ceil(0.1 * num_frames), num_frames))
    return SpanSet(((start, num_frames - 1),))


def _special_rows(token: int, count: int, num_codebooks: int) -> np.ndarray:
    return np.full((count, num_codebooks), token, dtype=np.int64)


def build_context(segments: Sequence[np.ndarray], sv: SpecialVocab, num_codebooks: int):
    """[sos] C_0 [m_1] C_1 ... [m_P] C_P [eos] for P = len(segments) - 1.

    Returns (tokens, roles, span_index).
    """
    num_spans = len(segments) - 1
    if num_spans > sv.max_spans:
        raise LayoutError(f"{num_spans} spans exceed the supported maximum of {sv.max_spans}")
    tokens = [_special_rows(sv.sos, 1, num_codebooks)]
    roles = [Role.SPECIAL]
    index = [-1]
    for i, segment in enumerate(segments):
        if i:
            tokens.append(_special_rows(sv.mask(i), 1, num_codebooks))
            roles.append(Role.SPECIAL)
            index.append(i - 1)
        tokens.append(np.asarray(segment, dtype=np.int64).reshape(-1, num_codebooks))
        roles.extend([Role.CONTEXT] * len(segment))
        index.extend([-1] * len(segment))
    tokens.append(_special_rows(sv.eos, 1, num_codebooks))
    roles.append(Role.SPECIAL)
    index.append(-1)
    return np.concatenate(tokens, axis=0), np.asarray(roles, dtype=np.int64), np.asarray(index, dtype=np.int64)


def rearrange(codes: CodeGrid, spans: SpanSet, sv: SpecialVocab) -> RearrangedSeq:
    grid = codes.codes
    num_frames, num_codebooks = grid.shape
    spans.check(num_frames)
    if len(spans) > sv.max_spans:
        raise LayoutError(f"{len(spans)} spans exceed the supported maximum of {sv.max_spans}")
    if grid.size and (grid.min() < 0 or grid.max() >= sv.codebook_size):
        raise LayoutError("Codes collide with special token ids")

    segments = []
    cursor = 0
    for start, end in spans:
        segments.append(grid[cursor:start])
        cursor = end + 1
    segments.append(grid[cursor:])
    tokens, roles, index = build_context(segments, sv, num_codebooks)

    gen_tokens = [tokens]
    gen_roles = [roles]
    gen_index = [index]
    for p, (start, end) in enumerate(spans, 1):
        length = end - start + 1
        gen_tokens += [_special_rows(sv.mask(p), 1, num_codebooks), grid[start:end + 1],
                       _special_rows(sv.eog, 1, num_codebooks)]
        gen_roles.append(np.asarray([Role.SPECIAL] + [Role.MASKED] * length + [Role.SPECIAL], dtype=np.int64))
        gen_index.append(np.full(length + 2, p - 1, dtype=np.int64))
    return RearrangedSeq(
        tokens=np.concatenate(gen_tokens, axis=0),
        roles=np.concatenate(gen_roles),
        span_index=np.concatenate(gen_index),
        num_frames=num_frames,
        spans=spans,
    )


def _is_special_row(row: np.ndarray, sv: SpecialVocab) -> bool:
    head = int(row[0])
    if sv.is_code(head):
        if any(not sv.is_code(int(v)) for v in row):
            raise LayoutError("Row mixes codec codes and special tokens")
        return False
    if np.any(row != head):
        raise LayoutError("Special token not replicated across channels")
    return True


def split_context(tokens: np.ndarray, sv: SpecialVocab) -> Tuple[List[np.ndarray], int]:
    """Parse [sos] C_0 [m_1] ... [m_P] C_P [eos] at the head of ``tokens``.

    Returns the context segments and the position just after [eos].
    """
    if len(tokens) == 0 or not _is_special_row(tokens[0], sv) or int(tokens[0, 0]) != sv.sos:
        raise LayoutError("Sequence must start with [sos]")
    segments: List[List[np.ndarray]] = [[]]
    pos = 1
    while True:
        if pos >= len(tokens):
            raise LayoutError("Context part is missing [eos]")
        row = tokens[pos]
        pos += 1
        if not _is_special_row(row, sv):
            segments[-1].append(row)
            continue
        head = int(row[0])
        if head == sv.eos:
            break
        p = sv.mask_index(head)
        if p != len(segments):
            raise LayoutError(f"Unexpected token {head} in context part (expected [m_{len(segments)}] or [eos])")
        segments.append([])
    num_codebooks = tokens.shape[1]
    return [np.asarray(s, dtype=np.int64).reshape(-1, num_codebooks) for s in segments], pos


def assemble_segments(context: Sequence[np.ndarray], generated: Sequence[np.ndarray]) -> Tuple[CodeGrid, SpanSet]:
    """Interleave C_0 M_1 C_1 ... M_P C_P; empty generated segments yield no span."""
    if len(context) != len(generated) + 1:
        raise LayoutError("Need exactly one more context segment than generated segments")
    num_codebooks = context[0].shape[1]
    pieces = [context[0]]
    spans = []
    cursor = len(context[0])
    for gen, ctx in zip(generated, context[1:]):
        if len(gen):
            spans.append((cursor, cursor + len(gen) - 1))
        pieces += [gen, ctx]
        cursor += len(gen) + len(ctx)
    grid = np.concatenate([np.asarray(p, dtype=np.int64).reshape(-1, num_codebooks) for p in pieces], axis=0)
    return CodeGrid(grid), SpanSet(tuple(spans))


def invert_rearrange(r: RearrangedSeq, sv: SpecialVocab) -> Tuple[CodeGrid, SpanSet]:
    tokens = r.tokens
    context, pos = split_context(tokens, sv)
    generated = []
    for p in range(1, len(context)):
        if pos >= len(tokens) or int(tokens[pos, 0]) != sv.mask(p) or not _is_special_row(tokens[pos], sv):
            raise LayoutError(f"Missing [m_{p}] at the start of span {p}")
        pos += 1
        frames = []
        while True:
            if pos >= len(tokens):
                raise LayoutError(f"Span {p} is missing its [eog]")
            row = tokens[pos]
            pos += 1
            if _is_special_row(row, sv):
                if int(row[0]) != sv.eog:
                    raise LayoutError(f"Unexpected token {int(row[0])} inside span {p}")
                break
            frames.append(row)
        if not frames:
            raise LayoutError(f"Span {p} is empty")
        generated.append(np.asarray(frames, dtype=np.int64))
    if pos != len(tokens):
        raise LayoutError(f"{len(tokens) - pos} trailing tokens after the last span")
    grid, spans = assemble_segments(context, generated)
    if grid.num_frames != r.num_frames:
        raise LayoutError(f"Recovered {grid.num_frames} frames, layout records {r.num_frames}")
    return grid, spans


def context_prefix(r: RearrangedSeq, sv: SpecialVocab) -> RearrangedSeq:
    """The part of ``r`` up to and including [eos] (what generation conditions on)."""
    _, pos = split_context(r.tokens, sv)
    return RearrangedSeq(r.tokens[:pos], r.roles[:pos], r.span_index[:pos], r.num_frames, r.spans)


def delay_stack(tokens: np.ndarray, sv: SpecialVocab) -> np.ndarray:
    """Shift channel k down by k rows; row t holds (x[t,0], x[t-1,1], ..., x[t-K+1,K-1])."""
    tokens = np.asarray(tokens, dtype=np.int64)
    length, num_codebooks = tokens.shape
    out = np.full((length + num_codebooks - 1, num_codebooks), sv.pad, dtype=np.int64)
    for k in range(num_codebooks):
        out[k:k + length, k] = tokens[:, k]
    return out


def delay_unstack(grid: np.ndarray, sv: SpecialVocab, num_codebooks: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.int64)
    if grid.ndim != 2 or grid.shape[1] != num_codebooks:
        raise LayoutError(f"Expected a (rows, {num_codebooks}) grid, got {grid.shape}")
    length = grid.shape[0] - (num_codebooks - 1)
    if length < 0:
        raise LayoutError("Grid is shorter than the delay pattern")
    out = np.empty((length, num_codebooks), dtype=np.int64)
    for k in range(num_codebooks):
        lead, tail = grid[:k, k], grid[k + length:, k]
        if np.any(lead != sv.pad) or np.any(tail != sv.pad):
            raise LayoutError(f"Channel {k} pad pattern is inconsistent with a delay of {k}")
        out[:, k] = grid[k:k + length, k]
    return out


def loss_mask(r: RearrangedSeq, sv: SpecialVocab) -> np.ndarray:
    """True on masked span content and on each [eog] (the stop decision)."""
    return (r.roles == Role.MASKED) | (r.tokens[:, 0] == sv.eog)


def delayed_loss_mask(mask: np.ndarray, num_codebooks: int) -> np.ndarray:
    """Per-channel mask aligned with ``delay_stack`` output; pads are never trained."""
    length = mask.shape[0]
    out = np.zeros((length + num_codebooks - 1, num_codebooks), dtype=bool)
    for k in range(num_codebooks):
        out[k:k + length, k] = mask
    return out


def format_layout(r: RearrangedSeq, sv: SpecialVocab) -> str:
    """One line per position: index, role, span id, per-channel tokens."""
    def name(token: int) -> str:
        if sv.is_code(token):
            return str(token)
        if token == sv.sos:
            return "[sos]"
        if token == sv.eos:
            return "[eos]"
        if token == sv.eog:
            return "[eog]"
        if token == sv.pad:
            return "[pad]"
        p = sv.mask_index(token)
        return f"[m{p}]" if p else f"<{token}>"

    lines = []
    for t in range(len(r)):
        span = "-" if r.span_index[t] < 0 else str(int(r.span_index[t]) + 1)
        channels = " ".join(name(int(v)) for v in r.tokens[t])
        lines.append(f"{t:5d} {Role(int(r.roles[t])).name.lower():8s} {span:>2s} {channels}")
    return "\n".join(lines)
