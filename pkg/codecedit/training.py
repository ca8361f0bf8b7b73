"""Pieces shared by the codec, watermark-codec and AR training loops."""

import math
import random
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from .audio import Waveform, peak_normalize, read_wav
from .config import TrainHyper
from .corpus import ManifestEntry
from .errors import TrainingError
from .logger import get_logger
from .losses import warmup_cosine

logger = get_logger(__name__)


def seed_everything(seed: int) -> np.random.Generator:
    """Seed python, numpy and torch; returns a numpy generator for data sampling."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def load_training_audio(entries: Sequence[ManifestEntry], sample_rate: int) -> List[Waveform]:
    if not entries:
        raise TrainingError("Training corpus is empty")
    return [peak_normalize(read_wav(e.audio_path, sample_rate)) for e in entries]


def build_optimizer(params: Iterable[torch.nn.Parameter], hyper: TrainHyper) -> Tuple[AdamW, LambdaLR]:
    optimizer = AdamW(list(params), lr=hyper.learning_rate, weight_decay=hyper.weight_decay)
    scheduler = LambdaLR(optimizer, lambda step: warmup_cosine(step, hyper.warmup_steps, hyper.steps))
    return optimizer, scheduler


def check_finite(step: int, components: Dict[str, float]) -> None:
    """Abort training on a NaN/inf loss term, reporting every component."""
    if not all(math.isfinite(v) for v in components.values()):
        raise TrainingError("Non-finite loss", step=step, components=components)


def crop_batch(corpus: Sequence[Waveform], rng: np.random.Generator, batch_size: int,
               segment_samples: int, align: int = 1) -> Tuple[torch.Tensor, List[int]]:
    """Random equal-length crops, (B, 1, segment_samples), plus the source indices.

    Crop offsets are multiples of ``align``; the codec trainers pass the stride so
    every crop sits on the frame grid used at inference.
    """
    picks = rng.integers(0, len(corpus), size=batch_size)
    crops = []
    for i in picks:
        samples = corpus[int(i)].samples
        positions = (len(samples) - segment_samples) // align + 1
        if positions < 1:
            raise TrainingError(f"Utterance of {len(samples)} samples is shorter than a {segment_samples}-sample crop")
        offset = int(rng.integers(0, positions)) * align
        crops.append(samples[offset:offset + segment_samples])
    return torch.from_numpy(np.stack(crops)).unsqueeze(1), [int(i) for i in picks]


def segment_length(corpus: Sequence[Waveform], stride: int, segment_frames: int) -> int:
    """Crop length in samples: ``segment_frames`` frames, capped by the shortest utterance."""
    shortest = min(len(w) for w in corpus) // stride
    if shortest < 1:
        raise TrainingError("Corpus holds an utterance shorter than one codec frame")
    frames = shortest if segment_frames <= 0 else min(segment_frames, shortest)
    return frames * stride
