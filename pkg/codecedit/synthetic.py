"""
Procedural toy speech corpus.

Every symbol of the alphabet is a fixed acoustic recipe (a harmonic tone at its
own pitch, with a noise burst for consonants); pseudo-words are symbol strings
and utterances are words separated by short silences. Alignments and the
lexicon are exact by construction.
"""

from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .audio import Waveform, write_wav
from .config import SynthSpec
from .corpus import ManifestEntry, save_alignment, save_lexicon, save_manifest
from .edit_planner import AlignedWord, WordAlignment
from .errors import ManifestError
from .logger import get_logger
from .phonemes import Lexicon

logger = get_logger(__name__)

VOWELS = set("aeiou")
BASE_PITCH_HZ = 110.0
PITCH_STEP_HZ = 37.0
NUM_HARMONICS = 3
NOISE_LEVEL = 0.3
PEAK = 0.9

MANIFEST_FILE = "manifest.jsonl"
LEXICON_FILE = "lexicon.tsv"


def symbol_pitch(spec: SynthSpec, symbol: str) -> float:
    return BASE_PITCH_HZ + PITCH_STEP_HZ * spec.alphabet.index(symbol)


def _render_symbol(spec: SynthSpec, symbol: str, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(num_samples) / spec.sample_rate
    f0 = symbol_pitch(spec, symbol)
    wave = sum(np.sin(2 * np.pi * h * f0 * t) / h for h in range(1, NUM_HARMONICS + 1))
    if symbol not in VOWELS:
        wave = wave + NOISE_LEVEL * rng.standard_normal(num_samples)
    envelope = np.sin(np.pi * (np.arange(num_samples) + 0.5) / num_samples)
    return 0.3 * envelope * wave


def _make_words(spec: SynthSpec, rng: np.random.Generator) -> List[str]:
    words: List[str] = []
    seen = set()
    attempts = 0
    while len(words) < spec.num_words:
        attempts += 1
        if attempts > 1000 * spec.num_words:
            raise ManifestError("Alphabet too small for the requested number of distinct words")
        length = int(rng.integers(spec.min_word_symbols, spec.max_word_symbols + 1))
        word = "".join(rng.choice(list(spec.alphabet), size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _render_utterance(spec: SynthSpec, words: List[str],
                      rng: np.random.Generator) -> Tuple[np.ndarray, List[AlignedWord], str]:
    sr = spec.sample_rate
    target = int(round(rng.uniform(spec.min_duration, spec.max_duration) * sr))
    pieces: List[np.ndarray] = []
    aligned: List[AlignedWord] = []
    cursor = 0

    def gap() -> int:
        return int(round(rng.uniform(*spec.gap_seconds) * sr))

    lead = gap()
    pieces.append(np.zeros(lead))
    cursor += lead
    while True:
        word = words[int(rng.integers(0, len(words)))]
        lengths = [int(round(rng.uniform(*spec.symbol_seconds) * sr)) for _ in word]
        trailing = gap()
        if aligned and cursor + sum(lengths) + trailing > target:
            break
        start = cursor
        for symbol, n in zip(word, lengths):
            pieces.append(_render_symbol(spec, symbol, n, rng))
            cursor += n
        aligned.append(AlignedWord(word, start / sr, cursor / sr))
        pieces.append(np.zeros(trailing))
        cursor += trailing
    if cursor < target:
        pieces.append(np.zeros(target - cursor))
    samples = np.concatenate(pieces)
    samples = samples * (PEAK / np.max(np.abs(samples)))
    return samples.astype(np.float32), aligned, " ".join(w.word for w in aligned)


def make_synthetic_corpus(spec: SynthSpec, out_dir: Union[str, Path]) -> List[ManifestEntry]:
    """Write WAVs, alignments, ``lexicon.tsv`` and ``manifest.jsonl``; returns entries with absolute paths."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    words = _make_words(spec, rng)
    lexicon = Lexicon({w: tuple(w) for w in words})
    entries: List[ManifestEntry] = []
    try:
        for i in range(spec.num_utterances):
            utt_id = f"utt_{i:04d}"
            samples, aligned, transcript = _render_utterance(spec, words, rng)
            wav_rel = f"wavs/{utt_id}.wav"
            align_rel = f"align/{utt_id}.json"
            write_wav(out_dir / wav_rel, Waveform(samples, spec.sample_rate))
            save_alignment(out_dir / align_rel, WordAlignment(tuple(aligned)))
            entries.append(ManifestEntry(id=utt_id, audio_path=wav_rel, transcript=transcript,
                                         alignment_path=align_rel, duration=len(samples) / spec.sample_rate))
        save_lexicon(out_dir / LEXICON_FILE, lexicon)
        save_manifest(out_dir / MANIFEST_FILE, entries)
    except OSError as e:
        raise ManifestError(f"Cannot write synthetic corpus to {out_dir}: {e}") from e
    logger.info("Wrote %s synthetic utterances (%s words) to %s", len(entries), len(words), out_dir)
    return [e.resolve(out_dir) for e in entries]


def corpus_statistics(entries: List[ManifestEntry], lexicon: Lexicon) -> Dict[str, float]:
    """Mean seconds per phoneme symbol (word boundaries excluded)."""
    seconds = sum(e.duration for e in entries)
    symbols = sum(len(lexicon.lookup(w)) for e in entries for w in e.transcript.split())
    return {"seconds_per_symbol": seconds / max(symbols, 1), "utterances": float(len(entries))}
