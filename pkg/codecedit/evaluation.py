"""
Desk-scale quality metrics: reconstruction SI-SNR, watermark frame accuracy,
context fidelity of unedited regions, teacher-forcing accuracy and the
runaway (max-length stop) rate of generation.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator

from .ar_model import ARModel
from .ar_trainer import TokenizedUtterance, collate, make_example, special_vocab
from .audio import Waveform
from .codec import codec_reconstruct
from .corpus import ManifestEntry
from .errors import GenerationError, NumericalError, ShapeMismatchError, SpanError, TrainingError
from .inference import InferenceEngine, STOP_MAX_LEN
from .logger import get_logger
from .phonemes import PhonemeSeq
from .seq_layout import RearrangedSeq, SpanSet, SpecialVocab, context_prefix, rearrange, sample_spans
from .watermark import predict_watermark, splice_and_mark

logger = get_logger(__name__)

SI_SNR_CAP_DB = 150.0


def si_snr(reference: Waveform, estimate: Waveform) -> float:
    return _si_snr(reference.samples, estimate.samples)


def _si_snr(reference: np.ndarray, estimate: np.ndarray) -> float:
    if reference.shape != estimate.shape:
        raise ShapeMismatchError(f"Length mismatch: {reference.shape} vs {estimate.shape}")
    ref = reference.astype(np.float64)
    est = estimate.astype(np.float64)
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0.0:
        raise NumericalError("SI-SNR is undefined for a zero-energy reference")
    target = (np.dot(est, ref) / ref_energy) * ref
    noise = est - target
    target_energy = float(np.dot(target, target))
    noise_energy = float(np.dot(noise, noise))
    if target_energy > 0.0 and noise_energy <= target_energy * 10.0 ** (-SI_SNR_CAP_DB / 10.0):
        return SI_SNR_CAP_DB
    if target_energy <= noise_energy * 10.0 ** (-SI_SNR_CAP_DB / 10.0):
        return -SI_SNR_CAP_DB
    return 10.0 * math.log10(target_energy / noise_energy)


def wm_frame_accuracy(true_bits: np.ndarray, predicted_probs: np.ndarray, threshold: float = 0.5) -> float:
    true_bits = np.asarray(true_bits)
    predicted_probs = np.asarray(predicted_probs)
    if true_bits.shape != predicted_probs.shape:
        raise ShapeMismatchError(f"{true_bits.shape} bits vs {predicted_probs.shape} predictions")
    if true_bits.size == 0:
        raise ShapeMismatchError("No frames to score")
    return float(np.mean((predicted_probs > threshold).astype(np.uint8) == true_bits))


def context_fidelity(original: Waveform, edited: Waveform, edited_spans: SpanSet, stride: int) -> float:
    """SI-SNR over the samples outside ``edited_spans``; both signals share the edited frame layout."""
    num_samples = min(len(original), len(edited))
    edited_spans.check(num_samples // stride)
    keep = np.ones(num_samples, dtype=bool)
    for start, end in edited_spans:
        keep[start * stride:(end + 1) * stride] = False
    if not keep.any():
        raise SpanError("Nothing left unedited to compare")
    return _si_snr(original.samples[:num_samples][keep], edited.samples[:num_samples][keep])


@torch.no_grad()
def teacher_forcing_accuracy(ar: ARModel, corpus: Sequence[TokenizedUtterance], seed: int = 0,
                             phoneme_pad: int = 0) -> np.ndarray:
    """Per-channel top-1 accuracy on the loss positions of freshly sampled layouts."""
    if not corpus:
        raise TrainingError("Evaluation corpus is empty")
    sv = special_vocab(ar.config)
    rng = np.random.default_rng(seed)
    K = ar.config.num_codebooks
    correct = np.zeros(K)
    total = np.zeros(K)
    for utt in corpus:
        phonemes, tokens, phoneme_mask, token_mask, mask = collate([make_example(utt, sv, rng)], sv, phoneme_pad)
        predicted = ar(phonemes, tokens, phoneme_mask, token_mask).argmax(dim=-1)
        hits = (predicted == tokens) & mask
        correct += hits.sum(dim=(0, 1)).numpy()
        total += mask.sum(dim=(0, 1)).numpy()
    return correct / np.maximum(total, 1)


@dataclass(frozen=True)
class GenerationCase:
    id: str
    phonemes: PhonemeSeq
    context: RearrangedSeq
    max_frames: Tuple[int, ...]


def _single_span(num_frames: int, rng: np.random.Generator) -> SpanSet:
    length = int(rng.integers(max(1, num_frames // 10), max(2, num_frames * 3 // 10) + 1))
    start = int(rng.integers(0, num_frames - length + 1))
    return SpanSet(((start, start + length - 1),))


def make_generation_cases(corpus: Sequence[TokenizedUtterance], sv: SpecialVocab, seed: int = 0,
                          min_cap: int = 50, cap_factor: int = 3) -> List[GenerationCase]:
    """One single-span regeneration case per utterance, capped like an edit."""
    rng = np.random.default_rng(seed)
    cases = []
    for utt in corpus:
        spans = _single_span(utt.codes.num_frames, rng)
        r = rearrange(utt.codes, spans, sv)
        cap = max(min_cap, cap_factor * spans.total_frames)
        cases.append(GenerationCase(utt.id, utt.phonemes, context_prefix(r, sv), (cap,)))
    return cases


def runaway_rate(engine: InferenceEngine, test_set: Sequence[GenerationCase], n_seeds: int,
                 gamma: Optional[float] = None) -> float:
    """Fraction of (case, seed) generations where some span stopped at its frame cap."""
    if n_seeds < 1:
        raise GenerationError("n_seeds must be >= 1")
    if not test_set:
        raise GenerationError("Empty test set")
    runaways = 0
    for case in test_set:
        for seed in range(n_seeds):
            result = engine.generate(case.phonemes, case.context, case.max_frames, seed=seed, gamma=gamma)
            runaways += STOP_MAX_LEN in result.stop_reasons
    return runaways / (len(test_set) * n_seeds)


def mean_stderr(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("No values to summarize")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def sign_test_p(differences: Sequence[float]) -> float:
    """One-sided exact sign test that the differences are positive; ties are dropped."""
    diffs = np.asarray(differences, dtype=np.float64)
    n = int(np.count_nonzero(diffs))
    if n == 0:
        return 1.0
    wins = int((diffs > 0).sum())
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    metrics: Dict[str, float]
    per_utterance: List[Dict[str, Any]] = []
    config: Dict[str, Any] = {}
    seed: int = 0

    @field_validator("metrics")
    @classmethod
    def _finite(cls, v: Dict[str, float]) -> Dict[str, float]:
        bad = [k for k, x in v.items() if not math.isfinite(x)]
        if bad:
            raise ValueError(f"Non-finite metrics: {bad}")
        return v

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8")
        return path


def render_table(report: EvalReport) -> str:
    width = max([len("metric")] + [len(k) for k in report.metrics])
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ----------"]
    for name in sorted(report.metrics):
        lines.append(f"{name:<{width}}  {report.metrics[name]:.4f}")
    return "\n".join(lines)


def run_evaluation(engine: InferenceEngine, entries: Sequence[ManifestEntry], waveforms: Sequence[Waveform],
                   corpus: Sequence[TokenizedUtterance], seed: int = 0, n_seeds: int = 5) -> EvalReport:
    """All metrics over held-out utterances; ``waveforms`` and ``corpus`` follow ``entries``."""
    if not entries:
        raise ValueError("Nothing to evaluate")
    models = engine.models
    cfg = models.codec.config
    rng = np.random.default_rng(seed)
    rows: List[Dict[str, Any]] = []
    recon, accuracy, with_ctx, without_ctx = [], [], [], []
    for entry, w in zip(entries, waveforms):
        usable = Waveform(w.samples[:w.num_frames(cfg.stride) * cfg.stride], w.sample_rate)
        codes_utt = next(u for u in corpus if u.id == entry.id).codes
        snr = si_snr(usable, codec_reconstruct(w, cfg, models.codec))
        spans = sample_spans(codes_utt.num_frames, rng)
        marked, wm = splice_and_mark(usable, codes_utt, spans, models.wm_codec)
        acc = wm_frame_accuracy(wm.bits, predict_watermark(marked, cfg, models.wm_codec))
        blind, _ = splice_and_mark(usable, codes_utt, spans, models.wm_codec, use_context=False)
        cd = context_fidelity(usable, marked, spans, cfg.stride)
        no_cd = context_fidelity(usable, blind, spans, cfg.stride)
        recon.append(snr)
        accuracy.append(acc)
        with_ctx.append(cd)
        without_ctx.append(no_cd)
        rows.append({"id": entry.id, "codec_si_snr": snr, "wm_accuracy": acc, "context_si_snr": cd,
                     "context_si_snr_ablated": no_cd, "spans": [list(s) for s in spans]})

    tf = teacher_forcing_accuracy(models.ar, corpus, seed)
    cases = make_generation_cases(corpus, special_vocab(models.ar.config), seed)
    metrics = {
        "codec_si_snr": mean_stderr(recon)[0],
        "codec_si_snr_stderr": mean_stderr(recon)[1],
        "wm_frame_accuracy": mean_stderr(accuracy)[0],
        "context_si_snr": mean_stderr(with_ctx)[0],
        "context_si_snr_ablated": mean_stderr(without_ctx)[0],
        "context_gain_stderr": mean_stderr(np.subtract(with_ctx, without_ctx))[1],
        "context_gain_sign_p": sign_test_p(np.subtract(with_ctx, without_ctx)),
        "runaway_rate": runaway_rate(engine, cases, n_seeds),
        "runaway_rate_no_cfg": runaway_rate(engine, cases, n_seeds, gamma=1.0),
    }
    for k, value in enumerate(tf):
        metrics[f"tf_accuracy_ch{k}"] = float(value)
    logger.info("Evaluated %s utterances", len(entries))
    return EvalReport(metrics=metrics, per_utterance=rows, config=engine.params.snapshot(), seed=seed)
