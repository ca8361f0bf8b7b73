"""
Span generation and the end-to-end edit / TTS pipelines.

Generation walks the delay-stacked grid one row at a time. Channel 0 decides
the structure (mask marker, codec frame or [eog]); channel k fills in frame
rows k steps later. When guidance is active the conditional and unconditional
phoneme streams run as one batch of two.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .ar_model import ARModel
from .ar_trainer import load_ar, special_vocab
from .audio import Waveform
from .codec import CodeGrid, NeuralCodec, encode, quantize_rvq
from .codec_trainer import load_codec
from .config import CFGParams, RunConfig, SamplerParams
from .edit_planner import WordAlignment, build_target_phonemes, diff_transcripts, plan_spans
from .errors import AlignmentError, AudioFormatError, GenerationError, LayoutError, ShapeMismatchError
from .logger import get_logger
from .phonemes import SPECIAL_SYMBOLS, Lexicon, PhonemeSeq, PhonemeVocab, tokenize_transcript
from .sampling import cfg_mix, nucleus_sample, random_unconditional
from .seq_layout import (RearrangedSeq, SpanSet, SpecialVocab, assemble_segments, build_context,
                         context_prefix, rearrange, split_context)
from .watermark import (WatermarkCodec, WatermarkSeq, build_masked_waveform, load_wm_codec,
                        splice_and_mark, wm_decode)

logger = get_logger(__name__)

STOP_EOG = "eog"
STOP_MAX_LEN = "max_len"

MIN_EDIT_CAP = 50
EDIT_CAP_FACTOR = 3
TTS_CAP_FACTOR = 20
PROMPT_SECONDS = (1.0, 8.0)

CODEC_DIR = "codec"
WM_DIR = "wm"
AR_DIR = "ar"


@dataclass(frozen=True)
class GenerationResult:
    codes: CodeGrid
    spans: SpanSet
    span_lengths: Tuple[int, ...]
    stop_reasons: Tuple[str, ...]

    @property
    def total_generated(self) -> int:
        return sum(self.span_lengths)


def _allowed_tokens(sv: SpecialVocab, with_eog: bool) -> torch.Tensor:
    allowed = torch.zeros(sv.size, dtype=torch.bool)
    allowed[:sv.codebook_size] = True
    if with_eog:
        allowed[sv.eog] = True
    return allowed


def _restrict(probs: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    probs = torch.where(allowed, probs, torch.zeros_like(probs))
    return probs / probs.sum(dim=-1, keepdim=True)


def generate_spans(y: PhonemeSeq, context: RearrangedSeq, ar: ARModel, cfg: CFGParams, sp: SamplerParams,
                   max_frames: Optional[Sequence[int]] = None, uncond_vocab_size: Optional[int] = None,
                   batch_unconditional: Optional[bool] = None) -> GenerationResult:
    """Fill every masked span of ``context`` (a layout prefix ending in [eos]).

    Args:
        max_frames: per-span frame caps; defaults to ``sp.max_span_frames`` for every span
        uncond_vocab_size: phoneme ids for the random unconditional sequence are drawn below this
        batch_unconditional: run the unconditional stream; defaults to ``gamma != 1``
    """
    arc = ar.config
    sv = special_vocab(arc)
    K = arc.num_codebooks
    ctx = np.asarray(context.tokens, dtype=np.int64)
    if ctx.ndim != 2 or ctx.shape[1] != K:
        raise GenerationError(f"Context has shape {ctx.shape}, model expects {K} channels")
    if ctx.size and (ctx.min() < 0 or ctx.max() >= sv.size):
        raise GenerationError(f"Context tokens outside the model vocabulary of size {sv.size}")
    y.check_vocab(arc.phoneme_vocab_size)
    segments, end = split_context(ctx, sv)
    if end != len(ctx):
        raise LayoutError("Generation context must end right after [eos]")
    num_spans = len(segments) - 1
    if num_spans == 0:
        codes, spans = assemble_segments(segments, [])
        return GenerationResult(codes, spans, (), ())

    if max_frames is None:
        if sp.max_span_frames is None:
            raise GenerationError("No span frame cap given")
        max_frames = [sp.max_span_frames] * num_spans
    if len(max_frames) != num_spans:
        raise GenerationError(f"{len(max_frames)} frame caps for {num_spans} spans")
    if min(max_frames) < 1:
        raise GenerationError("Span frame caps must be at least 1")

    np_rng = np.random.default_rng(sp.seed)
    generator = torch.Generator().manual_seed(sp.seed)
    use_uncond = (cfg.gamma != 1.0) if batch_unconditional is None else batch_unconditional
    streams = [torch.from_numpy(y.ids)]
    if use_uncond:
        y_uncond = random_unconditional(y, len(SPECIAL_SYMBOLS), uncond_vocab_size or arc.phoneme_vocab_size, np_rng)
        streams.append(torch.from_numpy(y_uncond.ids))
    phonemes = torch.stack(streams)

    rows: List[np.ndarray] = [r.copy() for r in ctx]
    is_frame: List[bool] = [False] * len(rows)
    delayed: List[np.ndarray] = []

    def delayed_row(t: int) -> np.ndarray:
        out = np.full(K, sv.pad, dtype=np.int64)
        for k in range(K):
            if 0 <= t - k < len(rows):
                out[k] = rows[t - k][k]
        return out

    for t in range(len(rows)):
        delayed.append(delayed_row(t))

    allow_with_eog = _allowed_tokens(sv, with_eog=True)
    allow_codes = _allowed_tokens(sv, with_eog=False)
    span, in_span, frames = 1, False, 0
    lengths: List[int] = []
    reasons: List[str] = []
    done = False
    t = len(rows)

    def end_span(reason: str) -> None:
        nonlocal span, in_span, frames, done
        rows.append(np.full(K, sv.eog, dtype=np.int64))
        is_frame.append(False)
        lengths.append(frames)
        reasons.append(reason)
        span, in_span, frames = span + 1, False, 0
        done = span > num_spans

    with torch.no_grad():
        while not (done and t >= len(rows) + K - 1):
            sample_ch0 = False
            if not done:
                if not in_span:
                    rows.append(np.full(K, sv.mask(span), dtype=np.int64))
                    is_frame.append(False)
                    in_span = True
                elif frames >= max_frames[span - 1]:
                    end_span(STOP_MAX_LEN)
                else:
                    sample_ch0 = True
            pending = [k for k in range(1, K) if 0 <= t - k < len(rows) and is_frame[t - k]]

            if sample_ch0 or pending:
                prefix = torch.from_numpy(np.stack(delayed)).unsqueeze(0).expand(len(streams), -1, -1)
                probs = torch.softmax(ar.next_logits(phonemes, prefix).double(), dim=-1)

                def draw(k: int, allowed: torch.Tensor) -> int:
                    p_cond = _restrict(probs[0, k], allowed)
                    mixed = cfg_mix(p_cond, _restrict(probs[1, k], allowed), cfg.gamma) if use_uncond else p_cond
                    return nucleus_sample(mixed, sp, generator)

                if sample_ch0:
                    token = draw(0, allow_with_eog if frames > 0 else allow_codes)
                    if token == sv.eog:
                        end_span(STOP_EOG)
                    else:
                        row = np.full(K, -1, dtype=np.int64)
                        row[0] = token
                        rows.append(row)
                        is_frame.append(True)
                        frames += 1
                for k in pending:
                    rows[t - k][k] = draw(k, allow_codes)

            delayed.append(delayed_row(t))
            t += 1

    generated = []
    pos = len(ctx)
    for _ in range(num_spans):
        pos += 1
        start = pos
        while is_frame[pos]:
            pos += 1
        generated.append(np.stack(rows[start:pos]))
        pos += 1
    codes, spans = assemble_segments(segments, generated)
    logger.debug("Generated spans %s with stop reasons %s", spans.spans, reasons)
    return GenerationResult(codes, spans, tuple(lengths), tuple(reasons))


@dataclass
class EditModels:
    codec: NeuralCodec
    wm_codec: WatermarkCodec
    ar: ARModel
    vocab: PhonemeVocab
    lexicon: Lexicon

    @classmethod
    def load(cls, root: Union[str, Path]) -> "EditModels":
        """Load ``<root>/codec``, ``<root>/wm`` and ``<root>/ar``."""
        root = Path(root)
        ar, vocab, lexicon = load_ar(root / AR_DIR)
        return cls(load_codec(root / CODEC_DIR), load_wm_codec(root / WM_DIR), ar, vocab, lexicon)


@dataclass(frozen=True)
class EditResult:
    waveform: Waveform
    watermark: WatermarkSeq
    generation: Optional[GenerationResult]
    source_spans: SpanSet


def remap_context_waveform(w: Waveform, source_spans: SpanSet, target_spans: SpanSet, num_frames: int,
                           stride: int) -> Waveform:
    """Place every unedited stretch of ``w`` at its frame position in the edited layout.

    Generated spans are left silent; context stretch i must hold the same frame count on both sides.
    """
    src_bounds = _context_bounds(source_spans, w.num_frames(stride))
    dst_bounds = _context_bounds(target_spans, num_frames)
    if len(src_bounds) != len(dst_bounds):
        raise ShapeMismatchError(f"{len(source_spans)} source spans vs {len(target_spans)} target spans")
    out = np.zeros(num_frames * stride, dtype=np.float32)
    for (s0, s1), (d0, d1) in zip(src_bounds, dst_bounds):
        if s1 - s0 != d1 - d0:
            raise ShapeMismatchError(f"Context stretch of {s1 - s0} frames maps onto {d1 - d0} frames")
        out[d0 * stride:d1 * stride] = w.samples[s0 * stride:s1 * stride]
    return Waveform(out, w.sample_rate)


def _context_bounds(spans: SpanSet, num_frames: int) -> List[Tuple[int, int]]:
    """Half-open frame ranges between (and around) the spans."""
    bounds = []
    cursor = 0
    for start, end in spans:
        bounds.append((cursor, start))
        cursor = end + 1
    bounds.append((cursor, num_frames))
    return bounds


def _sampler(params: RunConfig, seed: Optional[int]) -> SamplerParams:
    return params.sampler if seed is None else params.sampler.model_copy(update={"seed": seed})


def edit_speech(w: Waveform, orig_transcript: str, target_transcript: str, align: WordAlignment,
                models: EditModels, params: RunConfig, seed: Optional[int] = None, use_context: bool = True,
                use_watermark: bool = True) -> EditResult:
    cfg = models.codec.config
    orig_words = tokenize_transcript(orig_transcript)
    if align.words() != orig_words:
        raise AlignmentError("Alignment words do not match the original transcript")
    target_words = tokenize_transcript(target_transcript)
    if not target_words:
        raise GenerationError("Target transcript is empty")
    codes = quantize_rvq(encode(w, cfg, models.codec), models.codec)
    num_frames = codes.num_frames
    ops = diff_transcripts(orig_words, target_words)
    spans = plan_spans(align, ops, params.edit, num_frames)
    logger.info("Editing %s frames: %s edit blocks -> spans %s", num_frames, len(ops), spans.spans)

    if not len(spans):
        wm = WatermarkSeq(np.zeros(num_frames, dtype=np.uint8))
        mw = build_masked_waveform(w, spans, cfg)
        out = wm_decode(codes, wm, mw, models.wm_codec, use_context, use_watermark)
        return EditResult(out, wm, None, spans)

    sv = special_vocab(models.ar.config)
    r = rearrange(codes, spans, sv)
    y = build_target_phonemes(target_transcript, models.lexicon, models.vocab)
    sp = _sampler(params, seed)
    if sp.max_span_frames is not None:
        caps = [sp.max_span_frames] * len(spans)
    else:
        caps = [max(MIN_EDIT_CAP, EDIT_CAP_FACTOR * (e - s + 1)) for s, e in spans]
    result = generate_spans(y, context_prefix(r, sv), models.ar, params.cfg, sp, caps, len(models.vocab))

    context = remap_context_waveform(w, spans, result.spans, result.codes.num_frames, cfg.stride)
    out, wm = splice_and_mark(context, result.codes, result.spans, models.wm_codec, use_context, use_watermark)
    logger.info("Edit produced %s frames (%s generated, stop reasons %s)", result.codes.num_frames,
                result.total_generated, list(result.stop_reasons))
    return EditResult(out, wm, result, spans)


def synthesize_tts(prompt_wav: Waveform, prompt_transcript: str, target_transcript: str, models: EditModels,
                   params: RunConfig, seed: Optional[int] = None, use_context: bool = True,
                   use_watermark: bool = True) -> EditResult:
    """Continue the prompt with the target text; the prompt is decoded as context, the rest is marked."""
    cfg = models.codec.config
    if not tokenize_transcript(target_transcript):
        raise GenerationError("Target transcript is empty")
    if not PROMPT_SECONDS[0] <= prompt_wav.duration <= PROMPT_SECONDS[1]:
        raise AudioFormatError(f"Prompt lasts {prompt_wav.duration:.2f}s, expected "
                               f"{PROMPT_SECONDS[0]}-{PROMPT_SECONDS[1]}s")
    codes = quantize_rvq(encode(prompt_wav, cfg, models.codec), models.codec)
    K = codes.num_codebooks
    sv = special_vocab(models.ar.config)
    tokens, roles, index = build_context([codes.codes, np.zeros((0, K), dtype=np.int64)], sv, K)
    context = RearrangedSeq(tokens, roles, index, codes.num_frames, SpanSet())
    y = build_target_phonemes(f"{prompt_transcript} {target_transcript}", models.lexicon, models.vocab)
    target_len = len(build_target_phonemes(target_transcript, models.lexicon, models.vocab))
    sp = _sampler(params, seed)
    cap = sp.max_span_frames if sp.max_span_frames is not None else TTS_CAP_FACTOR * target_len
    logger.info("TTS from a %s-frame prompt, %s target phonemes", codes.num_frames, target_len)
    result = generate_spans(y, context, models.ar, params.cfg, sp, [cap], len(models.vocab))

    prompt_samples = prompt_wav.samples[:codes.num_frames * cfg.stride]
    padded = Waveform(np.concatenate([prompt_samples,
                                      np.zeros(result.total_generated * cfg.stride, dtype=np.float32)]),
                      prompt_wav.sample_rate)
    out, wm = splice_and_mark(padded, result.codes, result.spans, models.wm_codec, use_context, use_watermark)
    return EditResult(out, wm, result, SpanSet())


class InferenceEngine:
    """Models plus run parameters; the CLI and the evaluation harness go through this."""

    def __init__(self, models: EditModels, params: RunConfig):
        self.models = models
        self.params = params

    @classmethod
    def from_checkpoints(cls, root: Union[str, Path], params: RunConfig) -> "InferenceEngine":
        models = EditModels.load(root)
        if models.codec.config != params.codec:
            logger.warning("Checkpoint codec config differs from the run config; using the checkpoint's")
        return cls(models, params)

    def edit(self, w: Waveform, orig_transcript: str, target_transcript: str, align: WordAlignment,
             seed: Optional[int] = None, **flags) -> EditResult:
        return edit_speech(w, orig_transcript, target_transcript, align, self.models, self.params, seed, **flags)

    def tts(self, prompt_wav: Waveform, prompt_transcript: str, target_transcript: str,
            seed: Optional[int] = None, **flags) -> EditResult:
        return synthesize_tts(prompt_wav, prompt_transcript, target_transcript, self.models, self.params,
                              seed, **flags)

    def generate(self, y: PhonemeSeq, context: RearrangedSeq, max_frames: Sequence[int],
                 seed: Optional[int] = None, gamma: Optional[float] = None) -> GenerationResult:
        cfg = self.params.cfg if gamma is None else CFGParams(gamma=gamma)
        return generate_spans(y, context, self.models.ar, cfg, _sampler(self.params, seed), max_frames,
                              len(self.models.vocab))
