import numpy as np
import pytest
import torch

from codecedit.audio import Waveform
from codecedit.checkpoint import module_hash
from codecedit.codec import CodeGrid, decode, dequantize_rvq
from codecedit.errors import ShapeMismatchError, SpanError
from codecedit.seq_layout import SpanSet
from codecedit.watermark import (MaskedWaveform, WatermarkSeq, build_masked_waveform, load_wm_codec,
                                 predict_watermark, save_wm_codec, splice_and_mark, wm_decode)

STRIDE = 320
FRAMES = 20


def noise(num_frames=FRAMES, seed=0):
    samples = np.random.default_rng(seed).uniform(-0.5, 0.5, size=num_frames * STRIDE)
    return Waveform(samples.astype(np.float32), 16000)


def random_codes(num_frames=FRAMES, seed=0):
    return CodeGrid(np.random.default_rng(seed).integers(0, 16, size=(num_frames, 4)))


@pytest.fixture
def scrambled(wm_codec):
    """A watermark codec whose fusion layer reads every input."""
    with torch.no_grad():
        torch.manual_seed(5)
        wm_codec.fusion.weight.normal_(std=0.3)
        wm_codec.wm_embedding.weight.normal_()
    return wm_codec


def test_watermark_seq_from_spans():
    wm = WatermarkSeq.from_spans(SpanSet(((2, 4), (8, 8))), 10)
    assert wm.bits.tolist() == [0, 0, 1, 1, 1, 0, 0, 0, 1, 0]
    assert wm.ones == 4 and len(wm) == 10
    assert WatermarkSeq.from_spans(SpanSet(), 5).ones == 0


def test_watermark_seq_rejects_bad_bits():
    with pytest.raises(ShapeMismatchError):
        WatermarkSeq(np.zeros((2, 2)))
    with pytest.raises(ShapeMismatchError):
        WatermarkSeq(np.array([0, 2, 1]))


def test_masked_waveform_silences_span_windows(codec_config):
    w = noise()
    mw = build_masked_waveform(w, SpanSet(((3, 5),)), codec_config)
    assert len(mw) == len(w)
    assert np.all(mw.samples[3 * STRIDE:6 * STRIDE] == 0)
    np.testing.assert_array_equal(mw.samples[:3 * STRIDE], w.samples[:3 * STRIDE])
    np.testing.assert_array_equal(mw.samples[6 * STRIDE:], w.samples[6 * STRIDE:])


def test_masked_waveform_rejects_spans_past_the_end(codec_config):
    with pytest.raises(SpanError):
        build_masked_waveform(noise(), SpanSet(((15, 25),)), codec_config)


def test_frozen_parts_do_not_train(wm_codec, codec):
    assert not any(p.requires_grad for p in wm_codec.encoder.parameters())
    assert not any(p.requires_grad for p in wm_codec.quantizer.parameters())
    assert all(p.requires_grad for p in wm_codec.decoder.parameters())
    assert wm_codec.frozen_hash() == module_hash(codec.encoder, codec.quantizer)
    wm_codec.train()
    assert not wm_codec.encoder.training and wm_codec.decoder.training


def test_fresh_watermark_codec_decodes_like_its_base(wm_codec, codec, codec_config):
    codes = random_codes()
    spans = SpanSet(((4, 9),))
    out = wm_decode(codes, WatermarkSeq.from_spans(spans, FRAMES), build_masked_waveform(noise(), spans, codec_config),
                    wm_codec)
    expected = decode(dequantize_rvq(codes, codec), codec_config, codec)
    assert len(out) == FRAMES * STRIDE
    np.testing.assert_allclose(out.samples, expected.samples, atol=1e-5)


def test_context_switch_ignores_the_original(scrambled, codec_config):
    codes = random_codes()
    spans = SpanSet(((4, 9),))
    wm = WatermarkSeq.from_spans(spans, FRAMES)
    a = build_masked_waveform(noise(seed=1), spans, codec_config)
    b = build_masked_waveform(noise(seed=2), spans, codec_config)
    with_context = [wm_decode(codes, wm, mw, scrambled).samples for mw in (a, b)]
    assert not np.allclose(with_context[0], with_context[1])
    without = [wm_decode(codes, wm, mw, scrambled, use_context=False).samples for mw in (a, b)]
    np.testing.assert_array_equal(without[0], without[1])


def test_watermark_switch_ignores_the_bits(scrambled, codec_config):
    codes = random_codes()
    mw = build_masked_waveform(noise(), SpanSet(), codec_config)
    zeros = WatermarkSeq(np.zeros(FRAMES, dtype=np.uint8))
    ones = WatermarkSeq(np.ones(FRAMES, dtype=np.uint8))
    assert not np.allclose(wm_decode(codes, zeros, mw, scrambled).samples,
                           wm_decode(codes, ones, mw, scrambled).samples)
    np.testing.assert_array_equal(wm_decode(codes, zeros, mw, scrambled, use_watermark=False).samples,
                                  wm_decode(codes, ones, mw, scrambled, use_watermark=False).samples)


def test_frame_count_mismatches_rejected(wm_codec, codec_config):
    mw = build_masked_waveform(noise(), SpanSet(), codec_config)
    with pytest.raises(ShapeMismatchError):
        wm_decode(random_codes(FRAMES - 1), WatermarkSeq(np.zeros(FRAMES - 1)), mw, wm_codec)
    with pytest.raises(ShapeMismatchError):
        wm_decode(random_codes(), WatermarkSeq(np.zeros(FRAMES - 2)), mw, wm_codec)
    short = MaskedWaveform(mw.samples[:-STRIDE], SpanSet(), 16000)
    with pytest.raises(ShapeMismatchError):
        wm_decode(random_codes(), WatermarkSeq(np.zeros(FRAMES)), short, wm_codec)


def test_splice_and_mark_marks_exactly_the_spans(wm_codec):
    spans = SpanSet(((0, 2), (10, 14)))
    out, wm = splice_and_mark(noise(), random_codes(), spans, wm_codec)
    assert wm.ones == spans.total_frames
    assert len(out) == FRAMES * STRIDE
    with pytest.raises(ShapeMismatchError):
        splice_and_mark(noise(FRAMES + 1), random_codes(), spans, wm_codec)


def test_fresh_predictor_is_undecided(wm_codec, codec_config):
    probs = predict_watermark(noise(), codec_config, wm_codec)
    assert probs.shape == (FRAMES,)
    np.testing.assert_allclose(probs, 0.5)


def test_save_and_load(tmp_path, scrambled, codec_config):
    save_wm_codec(tmp_path / "wm", scrambled)
    loaded = load_wm_codec(tmp_path / "wm")
    assert loaded.frozen_hash() == scrambled.frozen_hash()
    codes, spans = random_codes(), SpanSet(((2, 3),))
    wm = WatermarkSeq.from_spans(spans, FRAMES)
    mw = build_masked_waveform(noise(), spans, codec_config)
    np.testing.assert_array_equal(wm_decode(codes, wm, mw, loaded).samples,
                                  wm_decode(codes, wm, mw, scrambled).samples)
