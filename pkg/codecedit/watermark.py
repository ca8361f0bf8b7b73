"""
Watermarking codec with context-aware decoding.

The speech encoder and quantizer are frozen copies of a trained codec. The
decoder sees, per frame, the dequantized codes, an embedded watermark bit and
features of the original waveform with the edited spans silenced; the masked
encoder's block outputs are also fed into the matching decoder blocks. A
separate encoder with a linear head predicts the watermark bit of every frame.
"""

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .audio import Waveform
from .checkpoint import load_checkpoint, module_hash, save_checkpoint
from .codec import CodeGrid, NeuralCodec, _frames_tensor, rvq_codes, rvq_lookup
from .config import CodecConfig
from .errors import AudioFormatError, ShapeMismatchError
from .logger import get_logger
from .seq_layout import SpanSet

logger = get_logger(__name__)

WM_VERSION = "wm-codec-v1"
WM_KIND = "wm_codec"
WM_EMBED_DIM = 8


@dataclass(frozen=True)
class WatermarkSeq:
    """One bit per codec frame: 1 = generated, 0 = original."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise ShapeMismatchError(f"Watermark must be 1-D, got shape {bits.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ShapeMismatchError("Watermark bits must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    def __len__(self) -> int:
        return int(self.bits.size)

    @classmethod
    def from_spans(cls, spans: SpanSet, num_frames: int) -> "WatermarkSeq":
        return cls(spans.frame_mask(num_frames).astype(np.uint8))

    @property
    def ones(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class MaskedWaveform:
    samples: np.ndarray
    spans: SpanSet
    sample_rate: int

    def __len__(self) -> int:
        return int(self.samples.shape[0])


def _sample_mask(spans: SpanSet, stride: int, length: int) -> np.ndarray:
    keep = np.ones(length, dtype=bool)
    for start, end in spans:
        keep[start * stride:(end + 1) * stride] = False
    return keep


def build_masked_waveform(w: Waveform, spans: SpanSet, cfg: CodecConfig) -> MaskedWaveform:
    """Zero the samples of every span window [s*stride, (e+1)*stride)."""
    spans.check(w.num_frames(cfg.stride))
    keep = _sample_mask(spans, cfg.stride, len(w))
    return MaskedWaveform(np.where(keep, w.samples, np.float32(0.0)), spans, w.sample_rate)


class WatermarkCodec(nn.Module):
    def __init__(self, base: NeuralCodec, wm_dim: int = WM_EMBED_DIM):
        super().__init__()
        cfg = base.config
        self.config = cfg
        self.version = WM_VERSION
        self.base_version = base.version

        self.encoder = copy.deepcopy(base.encoder)
        self.quantizer = copy.deepcopy(base.quantizer)
        for p in list(self.encoder.parameters()) + list(self.quantizer.parameters()):
            p.requires_grad_(False)

        self.masked_encoder = copy.deepcopy(base.encoder)
        self.decoder = copy.deepcopy(base.decoder)
        for p in list(self.masked_encoder.parameters()) + list(self.decoder.parameters()):
            p.requires_grad_(True)

        self.wm_embedding = nn.Embedding(2, wm_dim)
        self.fusion = nn.Linear(2 * cfg.latent_dim + wm_dim, cfg.latent_dim)
        with torch.no_grad():
            # start as the base decoder: pass the code features through, ignore the rest
            self.fusion.weight.zero_()
            self.fusion.weight[:, :cfg.latent_dim].copy_(torch.eye(cfg.latent_dim))
            self.fusion.bias.zero_()

        skip_channels = self.masked_encoder.skip_channels
        n = len(skip_channels)
        self.skip_proj = nn.ModuleList()
        for j, channels in enumerate(self.decoder.block_channels):
            proj = nn.Conv1d(skip_channels[n - 1 - j], channels, kernel_size=1)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.skip_proj.append(proj)

        self.predictor_encoder = copy.deepcopy(base.encoder)
        for p in self.predictor_encoder.parameters():
            p.requires_grad_(True)
        self.predictor_head = nn.Linear(cfg.latent_dim, 1)
        nn.init.zeros_(self.predictor_head.weight)
        nn.init.zeros_(self.predictor_head.bias)

    def train(self, mode: bool = True) -> "WatermarkCodec":
        super().train(mode)
        self.encoder.eval()
        self.quantizer.eval()
        return self

    def frozen_hash(self) -> str:
        return module_hash(self.encoder, self.quantizer)

    @torch.no_grad()
    def quantize(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, N) audio -> (B, T, K) codes with the frozen encoder and quantizer."""
        z = self.encoder(x)
        B, D, T = z.shape
        codes = rvq_codes(z.transpose(1, 2).reshape(B * T, D), self.quantizer.codebooks())
        return codes.view(B, T, -1)

    def synthesize(self, codes: torch.Tensor, bits: torch.Tensor, masked: torch.Tensor,
                   use_context: bool = True, use_watermark: bool = True) -> torch.Tensor:
        """
        Args:
            codes: (B, T, K) codec codes
            bits: (B, T) watermark bits
            masked: (B, 1, T*stride) original audio with edited spans silenced
        Returns:
            (B, 1, T*stride) waveform
        """
        q = rvq_lookup(codes, self.quantizer.codebooks()).transpose(1, 2)
        if not use_watermark:
            bits = torch.zeros_like(bits)
        if not use_context:
            masked = torch.zeros_like(masked)
        wm = self.wm_embedding(bits).transpose(1, 2)
        context, skips = self.masked_encoder(masked, return_skips=True)
        fused = self.fusion(torch.cat([q, wm, context], dim=1).transpose(1, 2)).transpose(1, 2)
        n = len(skips)
        projected = [proj(skips[n - 1 - j]) for j, proj in enumerate(self.skip_proj)]
        return self.decoder(fused, skips=projected)

    def watermark_logits(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, T*stride) -> (B, T) per-frame logits."""
        h = self.predictor_encoder(x).transpose(1, 2)
        return self.predictor_head(h).squeeze(-1)


def _check_frames(codes: CodeGrid, wm: WatermarkSeq, mw: MaskedWaveform, stride: int) -> int:
    num_frames = codes.num_frames
    if len(wm) != num_frames:
        raise ShapeMismatchError(f"Watermark has {len(wm)} bits for {num_frames} code frames")
    if len(mw) // stride != num_frames:
        raise ShapeMismatchError(f"Masked waveform spans {len(mw) // stride} frames, codes have {num_frames}")
    return num_frames


@torch.no_grad()
def wm_decode(codes: CodeGrid, wm: WatermarkSeq, mw: MaskedWaveform, params: WatermarkCodec,
              use_context: bool = True, use_watermark: bool = True) -> Waveform:
    cfg = params.config
    num_frames = _check_frames(codes, wm, mw, cfg.stride)
    codes.check_range(cfg.codebook_size)
    if mw.sample_rate != cfg.sample_rate:
        raise AudioFormatError(f"Masked waveform rate {mw.sample_rate} != codec rate {cfg.sample_rate}")
    usable = num_frames * cfg.stride
    audio = params.synthesize(
        torch.from_numpy(codes.codes).unsqueeze(0),
        torch.from_numpy(wm.bits.astype(np.int64)).unsqueeze(0),
        torch.from_numpy(np.ascontiguousarray(mw.samples[:usable])).view(1, 1, usable),
        use_context=use_context,
        use_watermark=use_watermark,
    )
    return Waveform(audio[0, 0].numpy(), cfg.sample_rate)


@torch.no_grad()
def predict_watermark(w: Waveform, cfg: CodecConfig, params: WatermarkCodec) -> np.ndarray:
    """Per-frame probability that the frame was generated; T = floor(len / stride)."""
    logits = params.watermark_logits(_frames_tensor(w, cfg))
    return torch.sigmoid(logits[0]).double().numpy()


def splice_and_mark(original: Waveform, generated_codes: CodeGrid, spans: SpanSet,
                    params: WatermarkCodec, use_context: bool = True,
                    use_watermark: bool = True) -> Tuple[Waveform, WatermarkSeq]:
    """Decode the full grid with the original as context; returns (waveform, WatermarkSeq).

    ``original`` must already be laid out on the frames of ``generated_codes``.
    """
    cfg = params.config
    num_frames = generated_codes.num_frames
    if original.num_frames(cfg.stride) != num_frames:
        raise ShapeMismatchError(f"Original covers {original.num_frames(cfg.stride)} frames, "
                                 f"generated codes {num_frames}")
    wm = WatermarkSeq.from_spans(spans, num_frames)
    mw = build_masked_waveform(original, spans, cfg)
    return wm_decode(generated_codes, wm, mw, params, use_context, use_watermark), wm


def save_wm_codec(directory: Union[str, Path], params: WatermarkCodec,
                  extra: Optional[Dict[str, Any]] = None) -> Path:
    extra = {"wm_dim": params.wm_embedding.embedding_dim, "frozen_sha256": params.frozen_hash(),
             **(extra or {})}
    return save_checkpoint(directory, WM_KIND, params.config, params, params.version, extra)


def load_wm_codec(directory: Union[str, Path]) -> WatermarkCodec:
    config, state, extra = load_checkpoint(directory, WM_KIND, CodecConfig, WM_VERSION)
    params = WatermarkCodec(NeuralCodec(config), wm_dim=int(extra.get("wm_dim", WM_EMBED_DIM)))
    params.load_state_dict(state)
    params.eval()
    return params


