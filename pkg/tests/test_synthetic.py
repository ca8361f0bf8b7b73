import math

import numpy as np
import pytest

from codecedit.audio import read_wav
from codecedit.config import EditParams, SynthSpec
from codecedit.corpus import load_alignment, load_lexicon, load_manifest
from codecedit.edit_planner import diff_transcripts, plan_spans
from codecedit.errors import ManifestError
from codecedit.synthetic import (LEXICON_FILE, MANIFEST_FILE, PEAK, corpus_statistics, make_synthetic_corpus,
                                 symbol_pitch)


def test_same_seed_same_bytes(tmp_path, synth_spec):
    make_synthetic_corpus(synth_spec, tmp_path / "a")
    make_synthetic_corpus(synth_spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 * synth_spec.num_utterances + 2
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_other_seed_other_audio(tmp_path, synth_spec):
    a = make_synthetic_corpus(synth_spec, tmp_path / "a")
    b = make_synthetic_corpus(synth_spec.model_copy(update={"seed": synth_spec.seed + 1}), tmp_path / "b")
    assert read_wav(a[0].audio_path, 16000).samples.tobytes() != read_wav(b[0].audio_path, 16000).samples.tobytes()


def test_manifest_lists_every_utterance(synth_corpus, synth_spec):
    root, entries = synth_corpus
    loaded = load_manifest(root / MANIFEST_FILE)
    assert [e.id for e in loaded] == [e.id for e in entries]
    assert len(entries) == synth_spec.num_utterances
    for entry in entries:
        assert synth_spec.min_duration - 1e-3 <= entry.duration <= synth_spec.max_duration + 1e-3
        w = read_wav(entry.audio_path, 16000)
        assert len(w) / 16000 == pytest.approx(entry.duration)
        assert float(np.max(np.abs(w.samples))) == pytest.approx(PEAK, abs=1e-3)


def test_alignments_fit_inside_the_audio(synth_corpus):
    _, entries = synth_corpus
    for entry in entries:
        align = load_alignment(entry.alignment_path)
        assert align.words() == entry.transcript.split()
        assert align.entries[0].start > 0
        assert align.entries[-1].end <= entry.duration
        for a, b in zip(align.entries, align.entries[1:]):
            assert a.end < b.start


def test_lexicon_covers_every_word(synth_corpus, synth_spec):
    root, entries = synth_corpus
    lexicon = load_lexicon(root / LEXICON_FILE)
    assert len(lexicon.entries) == synth_spec.num_words
    for entry in entries:
        for word in entry.transcript.split():
            assert lexicon.entries[word] == tuple(word)
    assert set(lexicon.symbols()) <= set(synth_spec.alphabet)


def test_silence_between_words(synth_corpus):
    _, entries = synth_corpus
    entry = entries[0]
    w = read_wav(entry.audio_path, 16000)
    align = load_alignment(entry.alignment_path)
    lead = int(round(align.entries[0].start * 16000))
    assert np.all(np.abs(w.samples[:lead]) < 1e-3)


def test_planned_span_covers_the_replaced_word(synth_corpus):
    _, entries = synth_corpus
    params = EditParams(alpha=0.0, frame_rate=50)
    for entry in entries:
        align = load_alignment(entry.alignment_path)
        words = entry.transcript.split()
        num_frames = int(round(entry.duration * 16000)) // 320
        i = len(words) // 2
        ops = diff_transcripts(words, words[:i] + ["zzz"] + words[i + 1:])
        (first, last), = plan_spans(align, ops, params, num_frames).spans
        word = align.entries[i]
        start, end = round(word.start * 16000), round(word.end * 16000)
        assert first * 320 <= start < (first + 1) * 320
        assert last * 320 < end <= (last + 1) * 320
        assert last - first + 1 == pytest.approx((word.end - word.start) * 50, abs=2)


def test_symbol_pitches_are_distinct():
    spec = SynthSpec()
    pitches = [symbol_pitch(spec, s) for s in spec.alphabet]
    assert len(set(pitches)) == len(pitches)
    assert min(pitches) > 0


def test_corpus_statistics(synth_corpus):
    root, entries = synth_corpus
    stats = corpus_statistics(entries, load_lexicon(root / LEXICON_FILE))
    assert stats["utterances"] == len(entries)
    assert 0.08 < stats["seconds_per_symbol"] < 1.0
    assert math.isfinite(stats["seconds_per_symbol"])


def test_too_small_alphabet_rejected(tmp_path):
    spec = SynthSpec(alphabet="ab", num_words=5, min_word_symbols=1, max_word_symbols=1, num_utterances=1)
    with pytest.raises(ManifestError):
        make_synthetic_corpus(spec, tmp_path)
