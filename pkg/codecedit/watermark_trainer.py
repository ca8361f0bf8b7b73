import time
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .audio import Waveform
from .checkpoint import module_hash
from .codec import NeuralCodec
from .config import CodecConfig, TrainHyper
from .errors import TrainingError
from .logger import get_logger
from .losses import reconstruction_loss
from .seq_layout import sample_spans
from .training import build_optimizer, check_finite, crop_batch, seed_everything, segment_length
from .watermark import WatermarkCodec

logger = get_logger(__name__)

BCE_WEIGHT = 1.0
JITTER_DB = 3.0
JITTER_PROB = 0.5
CLEAN_PROB = 0.25


def _span_batch(num_items: int, num_frames: int, rng: np.random.Generator,
                clean_prob: float = CLEAN_PROB) -> torch.Tensor:
    """Per-row watermark bits; a ``clean_prob`` share of rows carries no edit at all."""
    bits = np.zeros((num_items, num_frames), dtype=np.int64)
    for b in range(num_items):
        if rng.random() < clean_prob:
            continue
        bits[b] = sample_spans(num_frames, rng).frame_mask(num_frames)
    return torch.from_numpy(bits)


def _amplitude_jitter(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    gains_db = rng.uniform(-JITTER_DB, JITTER_DB, size=x.shape[0])
    gains = torch.from_numpy(10.0 ** (gains_db / 20.0)).to(x.dtype)
    return x * gains.view(-1, 1, 1)


def train_wm_codec(corpus: Sequence[Waveform], base: NeuralCodec, cfg: CodecConfig, hyper: TrainHyper,
                   rng_seed: int) -> Tuple[WatermarkCodec, List[Dict[str, Any]]]:
    """Train decoder, masked encoder and watermark predictor jointly; encoder and quantizer stay frozen."""
    if not corpus:
        raise TrainingError("Training corpus is empty")
    if base.config != cfg:
        raise TrainingError("Base codec config does not match the requested codec config")
    rng = seed_everything(rng_seed)
    base_hash = module_hash(base.encoder, base.quantizer)
    model = WatermarkCodec(base)
    model.train()
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer, scheduler = build_optimizer(trainable, hyper)
    segment = segment_length(corpus, cfg.stride, hyper.segment_frames)
    num_frames = segment // cfg.stride
    logger.info("Training watermark codec on %s utterances: %s steps, %s frames per crop",
                len(corpus), hyper.steps, num_frames)

    metrics: List[Dict[str, Any]] = []
    started = time.perf_counter()
    progress = tqdm(range(hyper.steps), desc="wm-codec", disable=None)
    for step in progress:
        batch, _ = crop_batch(corpus, rng, hyper.batch_size, segment, align=cfg.stride)
        codes = model.quantize(batch)
        bits = _span_batch(hyper.batch_size, num_frames, rng)
        keep = (1 - bits).to(batch.dtype).repeat_interleave(cfg.stride, dim=1).unsqueeze(1)
        x_hat = model.synthesize(codes, bits, batch * keep)
        recon = reconstruction_loss(x_hat, batch, cfg.l1_weight, cfg.spectral_weight, cfg.si_snr_weight).total

        # decoded crops carry their bits; the untouched originals are all-negative
        detector_input = _amplitude_jitter(x_hat, rng) if rng.random() < JITTER_PROB else x_hat
        logits = torch.cat([model.watermark_logits(detector_input), model.watermark_logits(batch)])
        targets = torch.cat([bits, torch.zeros_like(bits)])
        bce = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))
        loss = recon + BCE_WEIGHT * bce

        accuracy = float(((logits.detach() > 0).long() == targets).float().mean())
        record = {
            "step": step,
            "loss": float(loss.detach()),
            "recon": float(recon.detach()),
            "bce": float(bce.detach()),
            "accuracy": accuracy,
            "lr": scheduler.get_last_lr()[0],
        }
        check_finite(step, {k: record[k] for k in ("loss", "recon", "bce")})

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(trainable, hyper.grad_clip)
        optimizer.step()
        scheduler.step()

        record["seconds"] = round(time.perf_counter() - started, 3)
        metrics.append(record)
        progress.set_postfix(recon=f"{record['recon']:.4f}", bce=f"{record['bce']:.4f}")
        if step % hyper.log_every == 0 or step == hyper.steps - 1:
            logger.info("wm step %s: loss=%.4f recon=%.4f bce=%.4f acc=%.3f lr=%.2e",
                        step, record["loss"], record["recon"], record["bce"], accuracy, record["lr"])

    model.eval()
    if model.frozen_hash() != base_hash:
        raise TrainingError("Frozen encoder/quantizer changed during watermark training")
    return model, metrics
