import logging

import numpy as np
import pytest

from codecedit.errors import VocabularyError
from codecedit.phonemes import (BOUNDARY, SPECIAL_SYMBOLS, UNK, Lexicon, PhonemeSeq, PhonemeVocab, phonemize,
                                tokenize_transcript)

LEXICON = Lexicon({"kato": ("k", "a", "t", "o"), "mi": ("m", "ii")})


def test_tokenize_folds_case_and_whitespace():
    assert tokenize_transcript("  Kato\tMI  ") == ["kato", "mi"]


def test_phonemize_inserts_boundaries_and_falls_back_to_characters():
    assert phonemize("kato mi xy", LEXICON) == ["k", "a", "t", "o", BOUNDARY, "m", "ii", BOUNDARY, "x", "y"]


def test_empty_transcript_rejected():
    with pytest.raises(VocabularyError):
        phonemize("   ", LEXICON)


def test_vocab_layout():
    vocab = PhonemeVocab.build(LEXICON.symbols())
    assert vocab.symbols[:3] == SPECIAL_SYMBOLS
    assert vocab.num_special == 3
    assert vocab.pad_id == 0
    assert "ii" in vocab.symbols and "z" in vocab.symbols
    ids = vocab.encode(["k", "ii", "@@"])
    assert ids[-1] == vocab.index[UNK]
    assert vocab.decode(ids[:2]) == ["k", "ii"]


def test_vocab_rejects_bad_tables():
    with pytest.raises(VocabularyError):
        PhonemeVocab(("a", "b"))
    with pytest.raises(VocabularyError):
        PhonemeVocab(SPECIAL_SYMBOLS + ("a", "a"))


def test_phoneme_seq_checks():
    with pytest.raises(VocabularyError):
        PhonemeSeq(np.zeros(0, dtype=np.int64))
    seq = PhonemeSeq([3, 4, 5])
    seq.check_vocab(6)
    with pytest.raises(VocabularyError):
        seq.check_vocab(5)


def test_character_fallback_is_logged(caplog):
    lexicon = Lexicon({"ba": ("b", "a")})
    with caplog.at_level(logging.WARNING, logger="codecedit.phonemes"):
        assert lexicon.lookup("Ba") == ("b", "a")
        assert not caplog.records
        assert lexicon.lookup("zo") == ("z", "o")
    assert [r.levelname for r in caplog.records] == ["WARNING"]
    assert "'zo'" in caplog.records[0].getMessage()
