import numpy as np
import pytest
import torch

from codecedit.ar_trainer import save_ar, special_vocab
from codecedit.audio import Waveform, peak_normalize, read_wav
from codecedit.codec import CodeGrid
from codecedit.codec_trainer import save_codec
from codecedit.config import CFGParams, SamplerParams
from codecedit.corpus import load_alignment
from codecedit.errors import AlignmentError, AudioFormatError, GenerationError, LayoutError, ShapeMismatchError
from codecedit.inference import (STOP_EOG, STOP_MAX_LEN, InferenceEngine, edit_speech, generate_spans,
                                 remap_context_waveform, synthesize_tts)
from codecedit.phonemes import PhonemeSeq
from codecedit.seq_layout import SpanSet, context_prefix, rearrange
from codecedit.watermark import save_wm_codec

NO_CFG = CFGParams(gamma=1.0)
Y = PhonemeSeq([5, 6, 7, 8, 9, 10])


def codes(num_frames=30, seed=0):
    return CodeGrid(np.random.default_rng(seed).integers(0, 16, size=(num_frames, 4)))


def context(grid, spans, ar_config):
    sv = special_vocab(ar_config)
    return context_prefix(rearrange(grid, SpanSet(spans), sv), sv)


def bias_eog(ar_model, ar_config, bias):
    with torch.no_grad():
        ar_model.heads[0][-1].bias[special_vocab(ar_config).eog] = bias
    return ar_model


@pytest.fixture
def utterance(synth_corpus):
    entry = synth_corpus[1][0]
    w = peak_normalize(read_wav(entry.audio_path, 16000))
    return entry, w, load_alignment(entry.alignment_path)


@pytest.fixture
def capped(run_config):
    return run_config.model_copy(update={"sampler": SamplerParams(max_span_frames=4)})


def test_generation_is_seeded(ar_model, ar_config):
    ctx = context(codes(), ((5, 9), (20, 22)), ar_config)
    runs = [generate_spans(Y, ctx, ar_model, CFGParams(), SamplerParams(seed=s, max_span_frames=8))
            for s in (3, 3, 4)]
    np.testing.assert_array_equal(runs[0].codes.codes, runs[1].codes.codes)
    assert runs[0].stop_reasons == runs[1].stop_reasons
    assert len(runs[2].span_lengths) == 2


def test_generation_keeps_the_context(ar_model, ar_config):
    grid = codes()
    result = generate_spans(Y, context(grid, ((5, 9),), ar_config), ar_model, NO_CFG,
                            SamplerParams(seed=0, max_span_frames=8))
    (start, end), = result.spans.spans
    n = result.span_lengths[0]
    assert (start, end) == (5, 4 + n)
    assert result.codes.num_frames == 30 - 5 + n
    np.testing.assert_array_equal(result.codes.codes[:5], grid.codes[:5])
    np.testing.assert_array_equal(result.codes.codes[5 + n:], grid.codes[10:])
    result.codes.check_range(16)


def test_runaway_spans_stop_at_the_cap(ar_model, ar_config):
    bias_eog(ar_model, ar_config, -30.0)
    result = generate_spans(Y, context(codes(), ((2, 3), (10, 12)), ar_config), ar_model, CFGParams(),
                            SamplerParams(seed=1), max_frames=[3, 5])
    assert result.span_lengths == (3, 5)
    assert result.stop_reasons == (STOP_MAX_LEN, STOP_MAX_LEN)


def test_every_span_gets_at_least_one_frame(ar_model, ar_config):
    bias_eog(ar_model, ar_config, 30.0)
    result = generate_spans(Y, context(codes(), ((2, 3), (10, 12), (20, 25)), ar_config), ar_model, NO_CFG,
                            SamplerParams(seed=1, max_span_frames=5))
    assert result.span_lengths == (1, 1, 1)
    assert result.stop_reasons == (STOP_EOG,) * 3
    assert len(result.spans) == 3


@pytest.mark.parametrize("seed", range(4))
def test_gamma_one_matches_conditional_sampling(ar_model, ar_config, seed):
    ctx = context(codes(seed=seed), ((4, 8),), ar_config)
    sp = SamplerParams(seed=seed, max_span_frames=6)
    batched = generate_spans(Y, ctx, ar_model, NO_CFG, sp, batch_unconditional=True)
    plain = generate_spans(Y, ctx, ar_model, NO_CFG, sp, batch_unconditional=False)
    np.testing.assert_array_equal(batched.codes.codes, plain.codes.codes)
    assert batched.span_lengths == plain.span_lengths


def test_context_without_spans_comes_back_unchanged(ar_model, ar_config):
    grid = codes(12)
    result = generate_spans(Y, context(grid, (), ar_config), ar_model, CFGParams(), SamplerParams(seed=0))
    np.testing.assert_array_equal(result.codes.codes, grid.codes)
    assert result.total_generated == 0


def test_generation_input_checks(ar_model, ar_config):
    sv = special_vocab(ar_config)
    full = rearrange(codes(), SpanSet(((4, 8),)), sv)
    with pytest.raises(LayoutError):
        generate_spans(Y, full, ar_model, NO_CFG, SamplerParams(max_span_frames=4))
    ctx = context_prefix(full, sv)
    with pytest.raises(GenerationError, match="cap"):
        generate_spans(Y, ctx, ar_model, NO_CFG, SamplerParams())
    with pytest.raises(GenerationError):
        generate_spans(Y, ctx, ar_model, NO_CFG, SamplerParams(), max_frames=[2, 2])


def test_remap_context_waveform():
    w = Waveform(np.arange(1, 21, dtype=np.float32), 16000)
    out = remap_context_waveform(w, SpanSet(((3, 4),)), SpanSet(((3, 6),)), 12, stride=2)
    assert len(out) == 24
    np.testing.assert_array_equal(out.samples[:6], w.samples[:6])
    assert np.all(out.samples[6:14] == 0)
    np.testing.assert_array_equal(out.samples[14:], w.samples[10:])
    with pytest.raises(ShapeMismatchError):
        remap_context_waveform(w, SpanSet(((3, 4),)), SpanSet(((3, 6),)), 13, stride=2)


def test_unchanged_transcript_is_resynthesized_without_marks(utterance, edit_models, capped):
    entry, w, align = utterance
    result = edit_speech(w, entry.transcript, entry.transcript, align, edit_models, capped)
    assert result.generation is None
    assert result.watermark.ones == 0
    assert len(result.waveform) == w.num_frames(320) * 320


def test_edit_marks_exactly_the_generated_frames(utterance, edit_models, capped, lexicon):
    entry, w, align = utterance
    words = entry.transcript.split()
    words[0] = next(x for x in sorted(lexicon.entries) if x != words[0])
    result = edit_speech(w, entry.transcript, " ".join(words), align, edit_models, capped, seed=3)
    generation = result.generation
    assert len(result.source_spans) == 1
    assert result.watermark.ones == generation.total_generated
    assert len(result.watermark) == generation.codes.num_frames
    assert len(result.waveform) == generation.codes.num_frames * 320
    marked = np.flatnonzero(result.watermark.bits)
    if marked.size:
        (start, end), = generation.spans.spans
        assert (marked[0], marked[-1]) == (start, end)


def test_edit_needs_a_matching_alignment(utterance, edit_models, capped):
    _, w, align = utterance
    with pytest.raises(AlignmentError):
        edit_speech(w, "not the words", "not the words", align, edit_models, capped)


def test_tts_continues_the_prompt(utterance, edit_models, capped, lexicon):
    entry, w, _ = utterance
    target = " ".join(sorted(lexicon.entries)[:2])
    result = synthesize_tts(w, entry.transcript, target, edit_models, capped, seed=0)
    prompt_frames = w.num_frames(320)
    generated = result.generation.total_generated
    assert 1 <= generated <= 4
    assert len(result.waveform) == (prompt_frames + generated) * 320
    assert result.watermark.ones == generated
    assert not result.watermark.bits[:prompt_frames].any()


def test_tts_prompt_checks(edit_models, capped, make_tone):
    with pytest.raises(AudioFormatError):
        synthesize_tts(make_tone(0.5), "a", "b", edit_models, capped)
    with pytest.raises(GenerationError):
        synthesize_tts(make_tone(1.5), "a", "   ", edit_models, capped)


def test_engine_loads_checkpoints(tmp_path, edit_models, capped, ar_config):
    save_codec(tmp_path / "codec", edit_models.codec)
    save_wm_codec(tmp_path / "wm", edit_models.wm_codec)
    save_ar(tmp_path / "ar", edit_models.ar, edit_models.vocab, edit_models.lexicon)
    engine = InferenceEngine.from_checkpoints(tmp_path, capped)
    assert engine.models.vocab.symbols == edit_models.vocab.symbols
    ctx = context(codes(), ((4, 8),), ar_config)
    first = engine.generate(Y, ctx, [4], seed=2)
    again = InferenceEngine(edit_models, capped).generate(Y, ctx, [4], seed=2)
    np.testing.assert_array_equal(first.codes.codes, again.codes.codes)


def test_deleting_a_word_shortens_the_utterance(utterance, edit_models, capped):
    entry, w, align = utterance
    words = entry.transcript.split()
    assert len(words) >= 2
    longest = max(range(len(words)), key=lambda i: align.entries[i].end - align.entries[i].start)
    target = " ".join(words[:longest] + words[longest + 1:])
    result = edit_speech(w, entry.transcript, target, align, edit_models, capped, seed=1)
    assert result.generation.codes.num_frames < w.num_frames(320)
    assert len(result.waveform) < w.num_frames(320) * 320
