import time
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import torch
from tqdm import tqdm

from .audio import Waveform
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import CODEC_VERSION, NeuralCodec
from .config import CodecConfig, TrainHyper
from .errors import TrainingError
from .logger import get_logger
from .losses import ReconstructionLoss, reconstruction_loss
from .training import build_optimizer, check_finite, crop_batch, seed_everything, segment_length

logger = get_logger(__name__)

CODEC_KIND = "codec"


def _reconstruction(x_hat: torch.Tensor, x: torch.Tensor, cfg: CodecConfig) -> ReconstructionLoss:
    return reconstruction_loss(x_hat, x, cfg.l1_weight, cfg.spectral_weight, cfg.si_snr_weight)


def train_codec(corpus: Sequence[Waveform], cfg: CodecConfig, hyper: TrainHyper,
                rng_seed: int) -> Tuple[NeuralCodec, List[Dict[str, Any]]]:
    """Fit the codec on random crops; returns the model and one metrics dict per step.

    Loss = l1_weight * L1 + spectral_weight * log-spectral + si_snr_weight * (-SI-SNR / 10)
    + commitment_weight * commitment. Crops start on frame boundaries.
    """
    if not corpus:
        raise TrainingError("Training corpus is empty")
    rng = seed_everything(rng_seed)
    codec = NeuralCodec(cfg)
    codec.train()
    optimizer, scheduler = build_optimizer(codec.parameters(), hyper)
    segment = segment_length(corpus, cfg.stride, hyper.segment_frames)
    logger.info("Training codec on %s utterances: %s steps, batch %s, %s-sample crops",
                len(corpus), hyper.steps, hyper.batch_size, segment)

    metrics: List[Dict[str, Any]] = []
    started = time.perf_counter()
    progress = tqdm(range(hyper.steps), desc="codec", disable=None)
    for step in progress:
        batch, _ = crop_batch(corpus, rng, hyper.batch_size, segment, align=cfg.stride)
        x_hat, _, commitment, usage = codec(batch)
        recon = _reconstruction(x_hat, batch, cfg)
        loss = recon.total + cfg.commitment_weight * commitment

        record = {
            "step": step,
            "loss": float(loss.detach()),
            "l1": float(recon.l1.detach()),
            "spectral": float(recon.spectral.detach()),
            "si_snr": -10.0 * float(recon.si_snr.detach()),
            "commitment": float(commitment.detach()),
            "usage": usage,
            "lr": scheduler.get_last_lr()[0],
        }
        check_finite(step, {k: record[k] for k in ("loss", "l1", "spectral", "si_snr", "commitment")})

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(codec.parameters(), hyper.grad_clip)
        optimizer.step()
        scheduler.step()

        record["seconds"] = round(time.perf_counter() - started, 3)
        metrics.append(record)
        progress.set_postfix(loss=f"{record['loss']:.4f}", usage=f"{usage:.2f}")
        if step % hyper.log_every == 0 or step == hyper.steps - 1:
            logger.info("codec step %s: loss=%.4f l1=%.4f spectral=%.4f si_snr=%.2fdB commit=%.4f "
                        "usage=%.2f lr=%.2e",
                        step, record["loss"], record["l1"], record["spectral"], record["si_snr"],
                        record["commitment"], usage, record["lr"])

    codec.eval()
    return codec, metrics


@torch.no_grad()
def reconstruction_error(codec: NeuralCodec, corpus: Sequence[Waveform]) -> float:
    """Mean weighted reconstruction loss over whole utterances, in eval mode."""
    was_training = codec.training
    codec.eval()
    total = 0.0
    stride = codec.config.stride
    for w in corpus:
        usable = (len(w) // stride) * stride
        x = torch.from_numpy(w.samples[:usable]).view(1, 1, usable)
        x_hat, _, _, _ = codec(x)
        total += float(_reconstruction(x_hat, x, codec.config).total)
    codec.train(was_training)
    return total / len(corpus)


def save_codec(directory: Union[str, Path], codec: NeuralCodec, extra: Dict[str, Any] = None) -> Path:
    return save_checkpoint(directory, CODEC_KIND, codec.config, codec, codec.version, extra)


def load_codec(directory: Union[str, Path]) -> NeuralCodec:
    config, state, _ = load_checkpoint(directory, CODEC_KIND, CodecConfig, CODEC_VERSION)
    codec = NeuralCodec(config)
    codec.load_state_dict(state)
    codec.eval()
    return codec
