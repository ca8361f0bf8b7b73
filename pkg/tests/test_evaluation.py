import json
import math

import numpy as np
import pytest
from pydantic import ValidationError

from codecedit.ar_trainer import special_vocab, tokenize_corpus
from codecedit.audio import Waveform, peak_normalize, read_wav
from codecedit.errors import GenerationError, NumericalError, ShapeMismatchError, SpanError, TrainingError
from codecedit.evaluation import (SI_SNR_CAP_DB, EvalReport, GenerationCase, context_fidelity,
                                  make_generation_cases, mean_stderr, render_table, run_evaluation, runaway_rate,
                                  si_snr, sign_test_p, teacher_forcing_accuracy, wm_frame_accuracy)
from codecedit.inference import InferenceEngine
from codecedit.seq_layout import SpanSet

N = np.arange(1000)
SINE = Waveform(np.sin(2 * np.pi * 5 * N / 1000), 16000)
COSINE = Waveform(np.cos(2 * np.pi * 5 * N / 1000), 16000)


@pytest.fixture
def tokenized(synth_corpus, codec, lexicon, vocab):
    return tokenize_corpus(synth_corpus[1][:2], codec, lexicon, vocab)


def test_si_snr_of_a_perfect_estimate_is_capped():
    assert si_snr(SINE, SINE) == SI_SNR_CAP_DB


def test_si_snr_is_scale_invariant():
    noisy = Waveform(SINE.samples + 0.1 * COSINE.samples, 16000)
    scaled = Waveform(3.0 * noisy.samples, 16000)
    assert si_snr(SINE, scaled) == pytest.approx(si_snr(SINE, noisy), abs=1e-6)
    assert si_snr(SINE, noisy) == pytest.approx(20.0, abs=1e-3)


def test_si_snr_with_equal_orthogonal_noise_is_zero():
    mixed = Waveform(SINE.samples + COSINE.samples, 16000)
    assert si_snr(SINE, mixed) == pytest.approx(0.0, abs=1e-4)


def test_si_snr_floor_and_errors():
    assert si_snr(SINE, COSINE) <= -100.0
    assert si_snr(SINE, Waveform(np.zeros(1000), 16000)) == -SI_SNR_CAP_DB
    with pytest.raises(NumericalError):
        si_snr(Waveform(np.zeros(1000), 16000), SINE)
    with pytest.raises(ShapeMismatchError):
        si_snr(SINE, Waveform(SINE.samples[:-1], 16000))


def test_wm_frame_accuracy():
    assert wm_frame_accuracy(np.array([0, 1, 1, 0]), np.array([0.1, 0.9, 0.4, 0.6])) == 0.5
    assert wm_frame_accuracy(np.array([1, 1]), np.array([0.7, 0.8])) == 1.0
    with pytest.raises(ShapeMismatchError):
        wm_frame_accuracy(np.array([1, 0]), np.array([0.5]))
    with pytest.raises(ShapeMismatchError):
        wm_frame_accuracy(np.array([]), np.array([]))


def test_context_fidelity_ignores_the_edited_frames():
    stride = 100
    edited = SINE.samples.copy()
    edited[200:400] = 5.0
    spans = SpanSet(((2, 3),))
    assert context_fidelity(SINE, Waveform(edited, 16000), spans, stride) == SI_SNR_CAP_DB
    assert context_fidelity(SINE, Waveform(edited, 16000), SpanSet(), stride) < 10.0
    with pytest.raises(SpanError):
        context_fidelity(SINE, SINE, SpanSet(((0, 9),)), stride)


def test_teacher_forcing_accuracy_is_a_fraction(ar_model, tokenized):
    acc = teacher_forcing_accuracy(ar_model, tokenized, seed=0)
    assert acc.shape == (4,)
    assert np.all((acc >= 0) & (acc <= 1))
    with pytest.raises(TrainingError):
        teacher_forcing_accuracy(ar_model, [])


def test_generation_cases(tokenized, ar_config):
    cases = make_generation_cases(tokenized, special_vocab(ar_config), seed=0)
    assert [c.id for c in cases] == [u.id for u in tokenized]
    for case in cases:
        assert len(case.context.spans) == 1
        assert case.max_frames[0] >= max(50, 3 * case.context.spans.total_frames)


def test_runaway_rate_with_a_one_frame_cap(edit_models, run_config, tokenized, ar_config):
    engine = InferenceEngine(edit_models, run_config)
    cases = [GenerationCase(c.id, c.phonemes, c.context, (1,))
             for c in make_generation_cases(tokenized, special_vocab(ar_config))]
    assert runaway_rate(engine, cases, n_seeds=2) == 1.0
    assert runaway_rate(engine, cases, n_seeds=1, gamma=1.0) == 1.0
    with pytest.raises(GenerationError):
        runaway_rate(engine, cases, n_seeds=0)
    with pytest.raises(GenerationError):
        runaway_rate(engine, [], n_seeds=1)


def test_mean_stderr():
    mean, stderr = mean_stderr([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert stderr == pytest.approx(1.0 / math.sqrt(3.0))
    assert mean_stderr([4.0]) == (4.0, 0.0)
    with pytest.raises(ValueError):
        mean_stderr([])


def test_sign_test_p():
    assert sign_test_p([1.0] * 15 + [-1.0] * 5) == pytest.approx(21700 / 2 ** 20)
    assert sign_test_p([2.0, 0.0, 0.0]) == pytest.approx(0.5)
    assert sign_test_p([-1.0, -2.0]) == 1.0
    assert sign_test_p([0.0, 0.0]) == 1.0


def test_report_rejects_non_finite_metrics():
    with pytest.raises(ValidationError):
        EvalReport(metrics={"a": float("nan")})
    with pytest.raises(ValidationError):
        EvalReport(metrics={"a": float("inf")})


def test_report_write_and_table(tmp_path):
    report = EvalReport(metrics={"wm_frame_accuracy": 0.975, "codec_si_snr": 7.25}, seed=3)
    path = report.write(tmp_path / "out" / "report.json")
    assert json.loads(path.read_text())["metrics"]["codec_si_snr"] == 7.25
    lines = render_table(report).splitlines()
    assert lines[0].startswith("metric")
    assert lines[2].startswith("codec_si_snr") and lines[2].endswith("7.2500")
    assert lines[3].endswith("0.9750")


def test_run_evaluation_on_untrained_models(synth_corpus, edit_models, run_config, tokenized):
    entries = synth_corpus[1][:2]
    waveforms = [peak_normalize(read_wav(e.audio_path, 16000)) for e in entries]
    report = run_evaluation(InferenceEngine(edit_models, run_config), entries, waveforms, tokenized,
                            seed=0, n_seeds=1)
    for key in ("codec_si_snr", "wm_frame_accuracy", "context_si_snr", "context_si_snr_ablated",
                "runaway_rate", "runaway_rate_no_cfg", "tf_accuracy_ch0", "tf_accuracy_ch3", "context_gain_sign_p"):
        assert key in report.metrics
    assert 0.0 <= report.metrics["wm_frame_accuracy"] <= 1.0
    assert [row["id"] for row in report.per_utterance] == [e.id for e in entries]
    assert report.config["codec"]["num_codebooks"] == 4
