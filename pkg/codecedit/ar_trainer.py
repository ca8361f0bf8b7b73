import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from .ar_model import AR_VERSION, ARModel, weighted_nll_loss
from .audio import peak_normalize, read_wav
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import CodeGrid, NeuralCodec, encode, quantize_rvq
from .config import ARConfig, TrainHyper
from .corpus import ManifestEntry
from .edit_planner import build_target_phonemes
from .errors import CheckpointError, ConfigError, TrainingError
from .logger import get_logger
from .phonemes import Lexicon, PhonemeSeq, PhonemeVocab
from .seq_layout import (SpanSet, SpecialVocab, delay_stack, delayed_loss_mask, loss_mask, rearrange,
                         sample_continuation_span, sample_spans)
from .training import build_optimizer, check_finite, seed_everything

logger = get_logger(__name__)

AR_KIND = "ar"
CONTINUATION_PROB = 0.5


@dataclass(frozen=True)
class TokenizedUtterance:
    id: str
    codes: CodeGrid
    phonemes: PhonemeSeq


@dataclass(frozen=True)
class TrainingExample:
    phonemes: np.ndarray    # (L,)
    tokens: np.ndarray      # (S, K) delayed grid
    mask: np.ndarray        # (S, K) delayed loss mask
    spans: SpanSet


def special_vocab(cfg: ARConfig) -> SpecialVocab:
    return SpecialVocab(cfg.codebook_size, cfg.max_spans)


def tokenize_corpus(entries: Sequence[ManifestEntry], codec: NeuralCodec, lexicon: Lexicon,
                    vocab: PhonemeVocab) -> List[TokenizedUtterance]:
    """Codes of every utterance under the trained codec, paired with its phonemized transcript."""
    if not entries:
        raise TrainingError("Training corpus is empty")
    cfg = codec.config
    out = []
    for entry in entries:
        w = peak_normalize(read_wav(entry.audio_path, cfg.sample_rate))
        codes = quantize_rvq(encode(w, cfg, codec), codec)
        out.append(TokenizedUtterance(entry.id, codes, build_target_phonemes(entry.transcript, lexicon, vocab)))
    logger.info("Tokenized %s utterances (%s frames total)", len(out), sum(u.codes.num_frames for u in out))
    return out


def make_example(utt: TokenizedUtterance, sv: SpecialVocab, rng: np.random.Generator,
                 continuation_prob: float = CONTINUATION_PROB) -> TrainingExample:
    """Mask the tail with ``continuation_prob``, otherwise 1..max_spans random spans."""
    num_frames = utt.codes.num_frames
    spans = sample_continuation_span(num_frames, rng, continuation_prob)
    if spans is None:
        spans = sample_spans(num_frames, rng, sv.max_spans)
    r = rearrange(utt.codes, spans, sv)
    return TrainingExample(
        phonemes=utt.phonemes.ids,
        tokens=delay_stack(r.tokens, sv),
        mask=delayed_loss_mask(loss_mask(r, sv), utt.codes.num_codebooks),
        spans=spans,
    )


def collate(examples: Sequence[TrainingExample], sv: SpecialVocab, phoneme_pad: int):
    """Left-pad phonemes, right-pad token grids; returns tensors for ``ARModel.forward``."""
    B = len(examples)
    L = max(len(e.phonemes) for e in examples)
    S = max(len(e.tokens) for e in examples)
    K = examples[0].tokens.shape[1]
    phonemes = np.full((B, L), phoneme_pad, dtype=np.int64)
    phoneme_mask = np.zeros((B, L), dtype=bool)
    tokens = np.full((B, S, K), sv.pad, dtype=np.int64)
    token_mask = np.zeros((B, S), dtype=bool)
    mask = np.zeros((B, S, K), dtype=bool)
    for b, e in enumerate(examples):
        n = len(e.phonemes)
        phonemes[b, L - n:] = e.phonemes
        phoneme_mask[b, L - n:] = True
        s = len(e.tokens)
        tokens[b, :s] = e.tokens
        token_mask[b, :s] = True
        mask[b, :s] = e.mask
    return (torch.from_numpy(phonemes), torch.from_numpy(tokens), torch.from_numpy(phoneme_mask),
            torch.from_numpy(token_mask), torch.from_numpy(mask))


def train_ar(corpus: Sequence[TokenizedUtterance], cfg: ARConfig, hyper: TrainHyper, rng_seed: int,
             phoneme_pad: int = 0) -> Tuple[ARModel, List[Dict[str, Any]]]:
    if not corpus:
        raise TrainingError("Training corpus is empty")
    if corpus[0].codes.num_codebooks != cfg.num_codebooks:
        raise ConfigError(f"Corpus has {corpus[0].codes.num_codebooks} codebooks, model expects {cfg.num_codebooks}")
    rng = seed_everything(rng_seed)
    sv = special_vocab(cfg)
    model = ARModel(cfg)
    model.train()
    optimizer, scheduler = build_optimizer(model.parameters(), hyper)
    logger.info("Training AR model on %s utterances: %s steps, batch %s, %s parameters",
                len(corpus), hyper.steps, hyper.batch_size, sum(p.numel() for p in model.parameters()))

    metrics: List[Dict[str, Any]] = []
    started = time.perf_counter()
    progress = tqdm(range(hyper.steps), desc="ar", disable=None)
    for step in progress:
        picks = rng.integers(0, len(corpus), size=hyper.batch_size)
        examples = [make_example(corpus[int(i)], sv, rng) for i in picks]
        phonemes, tokens, phoneme_mask, token_mask, mask = collate(examples, sv, phoneme_pad)
        logits = model(phonemes, tokens, phoneme_mask, token_mask)
        loss = weighted_nll_loss(logits, tokens, mask, cfg.codebook_weights)

        record = {"step": step, "loss": float(loss.detach()), "lr": scheduler.get_last_lr()[0]}
        check_finite(step, {"loss": record["loss"]})

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), hyper.grad_clip)
        optimizer.step()
        scheduler.step()

        record["seconds"] = round(time.perf_counter() - started, 3)
        metrics.append(record)
        progress.set_postfix(loss=f"{record['loss']:.4f}")
        if step % hyper.log_every == 0 or step == hyper.steps - 1:
            logger.info("ar step %s: loss=%.4f lr=%.2e", step, record["loss"], record["lr"])

    model.eval()
    return model, metrics


def save_ar(directory: Union[str, Path], model: ARModel, vocab: PhonemeVocab, lexicon: Lexicon,
            extra: Optional[Dict[str, Any]] = None) -> Path:
    """The phoneme table and lexicon travel with the weights so inference can phonemize."""
    extra = {
        "phoneme_symbols": list(vocab.symbols),
        "lexicon": {word: list(symbols) for word, symbols in sorted(lexicon.entries.items())},
        **(extra or {}),
    }
    return save_checkpoint(directory, AR_KIND, model.config, model, model.version, extra)


def load_ar(directory: Union[str, Path]) -> Tuple[ARModel, PhonemeVocab, Lexicon]:
    config, state, extra = load_checkpoint(directory, AR_KIND, ARConfig, AR_VERSION)
    try:
        vocab = PhonemeVocab(tuple(extra["phoneme_symbols"]))
        lexicon = Lexicon({w: tuple(s) for w, s in extra["lexicon"].items()})
    except (KeyError, AttributeError, TypeError) as e:
        raise CheckpointError(f"AR checkpoint at {directory} lacks its phoneme tables: {e}") from e
    model = ARModel(config)
    model.load_state_dict(state)
    model.eval()
    return model, vocab, lexicon
