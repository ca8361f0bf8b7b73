from pathlib import Path

import numpy as np
import pytest
import torch

from codecedit.ar_model import ARModel
from codecedit.audio import Waveform
from codecedit.codec import NeuralCodec
from codecedit.config import ARConfig, CodecConfig, RunConfig, SynthSpec
from codecedit.corpus import load_lexicon
from codecedit.inference import EditModels
from codecedit.phonemes import PhonemeVocab
from codecedit.synthetic import LEXICON_FILE, make_synthetic_corpus
from codecedit.watermark import WatermarkCodec

TINY_CODEC = dict(num_codebooks=4, codebook_size=16, base_dim=4, latent_dim=16)
TINY_AR = dict(num_layers=1, hidden_size=32, num_heads=2, num_codebooks=4, codebook_size=16,
               phoneme_vocab_size=64, max_seq_len=1024, head_layers=1)


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run tests that train toy models")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def codec_config() -> CodecConfig:
    return CodecConfig(**TINY_CODEC)


@pytest.fixture
def ar_config() -> ARConfig:
    return ARConfig(**TINY_AR)


@pytest.fixture
def run_config(codec_config, ar_config) -> RunConfig:
    return RunConfig(codec=codec_config, ar=ar_config)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def codec(codec_config) -> NeuralCodec:
    torch.manual_seed(0)
    model = NeuralCodec(codec_config)
    model.eval()
    return model


@pytest.fixture
def wm_codec(codec) -> WatermarkCodec:
    torch.manual_seed(1)
    model = WatermarkCodec(codec)
    model.eval()
    return model


@pytest.fixture
def ar_model(ar_config) -> ARModel:
    torch.manual_seed(2)
    model = ARModel(ar_config)
    model.eval()
    return model


def tone(seconds: float, sample_rate: int = 16000, freq: float = 220.0, amplitude: float = 0.5) -> Waveform:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return Waveform((amplitude * np.sin(2 * np.pi * freq * t)).astype(np.float32), sample_rate)


@pytest.fixture(scope="session")
def synth_spec() -> SynthSpec:
    return SynthSpec(num_words=8, num_utterances=4, min_duration=2.0, max_duration=2.4, seed=7)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory, synth_spec):
    """(corpus dir, entries) of a small synthetic corpus shared by the whole session."""
    out = tmp_path_factory.mktemp("synth")
    entries = make_synthetic_corpus(synth_spec, out)
    return Path(out), entries


@pytest.fixture
def lexicon(synth_corpus):
    return load_lexicon(synth_corpus[0] / LEXICON_FILE)


@pytest.fixture
def vocab(lexicon) -> PhonemeVocab:
    return PhonemeVocab.build(lexicon.symbols())


@pytest.fixture
def edit_models(codec, wm_codec, ar_model, vocab, lexicon) -> EditModels:
    return EditModels(codec, wm_codec, ar_model, vocab, lexicon)


@pytest.fixture
def make_tone():
    return tone
