"""
Residual-vector-quantized waveform codec.

Convolutional encoder/decoder in the SEANet layout (one residual unit and one
strided convolution per block) with a K-stage residual quantizer whose
codebooks are learned by exponential moving averages.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import Waveform
from .config import CodecConfig
from .errors import AudioFormatError, NumericalError, ShapeMismatchError
from .logger import get_logger
from .validation import validate_waveform

logger = get_logger(__name__)

CODEC_VERSION = "codec-v1"


@dataclass(frozen=True)
class LatentFrames:
    """Encoder output, one row per codec frame: (T, D)."""

    values: torch.Tensor

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class CodeGrid:
    """T x K integer codes, column k from codebook k."""

    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.ndim != 2:
            raise ShapeMismatchError(f"CodeGrid must be 2-D (T, K), got shape {codes.shape}")
        object.__setattr__(self, "codes", codes)

    @property
    def num_frames(self) -> int:
        return int(self.codes.shape[0])

    @property
    def num_codebooks(self) -> int:
        return int(self.codes.shape[1])

    def check_range(self, codebook_size: int) -> None:
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= codebook_size):
            raise ShapeMismatchError(f"Code out of range [0, {codebook_size})")


def _block_padding(ratio: int) -> int:
    # kernel 2r, stride r: this padding maps L -> L / r exactly when r divides L
    return (ratio + 1) // 2


class ResidualUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        hidden = max(channels // 2, 1)
        self.block = nn.Sequential(
            nn.ELU(),
            nn.Conv1d(channels, hidden, kernel_size=3, padding=1),
            nn.ELU(),
            nn.Conv1d(hidden, channels, kernel_size=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class EncoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, ratio: int):
        super().__init__()
        self.block = nn.Sequential(
            ResidualUnit(in_channels),
            nn.ELU(),
            nn.Conv1d(in_channels, out_channels, kernel_size=2 * ratio, stride=ratio,
                      padding=_block_padding(ratio)),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class DecoderBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, ratio: int):
        super().__init__()
        pad = _block_padding(ratio)
        self.block = nn.Sequential(
            nn.ELU(),
            nn.ConvTranspose1d(in_channels, out_channels, kernel_size=2 * ratio, stride=ratio,
                               padding=pad, output_padding=2 * pad - ratio),
            ResidualUnit(out_channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class SEANetEncoder(nn.Module):
    """Waveform (B, 1, T*stride) -> latents (B, D, T); channels double per block."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        channels = config.base_dim
        self.stem = nn.Conv1d(1, channels, kernel_size=7, padding=3)
        blocks = []
        self.skip_channels: List[int] = []
        for ratio in config.ratios:
            blocks.append(EncoderBlock(channels, channels * 2, ratio))
            channels *= 2
            self.skip_channels.append(channels)
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(nn.ELU(), nn.Conv1d(channels, config.latent_dim, kernel_size=3, padding=1))

    def forward(self, x: torch.Tensor, return_skips: bool = False):
        h = self.stem(x)
        skips = []
        for block in self.blocks:
            h = block(h)
            skips.append(h)
        z = self.head(h)
        if return_skips:
            return z, skips
        return z


class SEANetDecoder(nn.Module):
    """Latents (B, D, T) -> waveform (B, 1, T*stride).

    ``skips`` (optional) are added to the input of each block, coarsest first.
    """

    def __init__(self, config: CodecConfig):
        super().__init__()
        channels = config.base_dim * 2 ** len(config.ratios)
        self.stem = nn.Conv1d(config.latent_dim, channels, kernel_size=7, padding=3)
        blocks = []
        self.block_channels: List[int] = []
        for ratio in reversed(config.ratios):
            self.block_channels.append(channels)
            blocks.append(DecoderBlock(channels, channels // 2, ratio))
            channels //= 2
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(nn.ELU(), nn.Conv1d(channels, 1, kernel_size=7, padding=3))

    @property
    def final_layer(self) -> nn.Conv1d:
        return self.head[-1]

    def forward(self, z: torch.Tensor, skips: Optional[Sequence[torch.Tensor]] = None) -> torch.Tensor:
        h = self.stem(z)
        for i, block in enumerate(self.blocks):
            if skips is not None:
                h = h + skips[i]
            h = block(h)
        return self.head(h)


def nearest_code(residual: torch.Tensor, codebook: torch.Tensor, exact: bool = True) -> torch.Tensor:
    """Index of the closest codebook row for each residual row; ties go to the lowest index."""
    if exact:
        distances = torch.cdist(residual, codebook, compute_mode="donot_use_mm_for_euclid_dist")
    else:
        distances = (
            residual.pow(2).sum(dim=1, keepdim=True)
            - 2 * residual @ codebook.t()
            + codebook.pow(2).sum(dim=1)
        )
    return torch.argmin(distances, dim=1)


def rvq_codes(values: torch.Tensor, codebooks: Sequence[torch.Tensor]) -> torch.Tensor:
    """Greedy residual quantization of (T, D) values -> (T, K) codes."""
    residual = values
    codes = []
    for codebook in codebooks:
        idx = nearest_code(residual, codebook)
        residual = residual - codebook[idx]
        codes.append(idx)
    return torch.stack(codes, dim=1)


def rvq_lookup(codes: torch.Tensor, codebooks: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of codebook rows selected by (..., K) codes."""
    out = 0
    for k, codebook in enumerate(codebooks):
        out = out + F.embedding(codes[..., k], codebook)
    return out


class EMACodebook(nn.Module):
    def __init__(self, size: int, dim: int, decay: float, dead_threshold: float, epsilon: float = 1e-5):
        super().__init__()
        self.size = size
        self.decay = decay
        self.dead_threshold = dead_threshold
        self.epsilon = epsilon
        embeddings = torch.randn(size, dim) * 0.1
        self.register_buffer("embeddings", embeddings)
        self.register_buffer("cluster_size", torch.ones(size))
        self.register_buffer("embed_sum", embeddings.clone())
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def _seed_from(self, x: torch.Tensor, rows: torch.Tensor) -> None:
        picks = torch.randint(0, x.shape[0], (int(rows.sum()),), device=x.device)
        self.embeddings[rows] = x[picks]
        self.embed_sum[rows] = x[picks]
        self.cluster_size[rows] = 1.0

    @torch.no_grad()
    def update(self, x: torch.Tensor, idx: torch.Tensor) -> None:
        if not bool(self.initialized):
            self._seed_from(x, torch.ones(self.size, dtype=torch.bool, device=x.device))
            self.initialized.fill_(True)
            return
        onehot = F.one_hot(idx, self.size).type_as(x)
        self.cluster_size.mul_(self.decay).add_(onehot.sum(0), alpha=1 - self.decay)
        self.embed_sum.mul_(self.decay).add_(onehot.t() @ x, alpha=1 - self.decay)
        n = self.cluster_size.sum()
        smoothed = (self.cluster_size + self.epsilon) / (n + self.size * self.epsilon) * n
        self.embeddings.copy_(self.embed_sum / smoothed.unsqueeze(1))

        dead = self.cluster_size < self.dead_threshold
        if dead.any():
            logger.debug("Re-seeding %s dead codes", int(dead.sum()))
            self._seed_from(x, dead)


class ResidualVectorQuantizer(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.codebook_size = config.codebook_size
        self.books = nn.ModuleList([
            EMACodebook(config.codebook_size, config.latent_dim, config.ema_decay, config.dead_code_threshold)
            for _ in range(config.num_codebooks)
        ])

    def codebooks(self) -> List[torch.Tensor]:
        return [book.embeddings for book in self.books]

    def forward(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, float]:
        """
        Args:
            z: (N, D) latent rows
        Returns:
            quantized (straight-through), codes (N, K), commitment loss, codebook usage
        """
        residual = z
        quantized = torch.zeros_like(z)
        commitment = z.new_zeros(())
        codes = []
        for book in self.books:
            idx = nearest_code(residual.detach(), book.embeddings, exact=not self.training)
            if self.training:
                book.update(residual.detach(), idx)
                idx = nearest_code(residual.detach(), book.embeddings, exact=False)
            q = book.embeddings[idx].detach()
            commitment = commitment + F.mse_loss(residual, q)
            residual = residual - q
            quantized = quantized + q
            codes.append(idx)
        codes_t = torch.stack(codes, dim=1)
        usage = float(np.mean([codes_t[:, k].unique().numel() / self.codebook_size
                               for k in range(codes_t.shape[1])]))
        quantized = z + (quantized - z).detach()
        return quantized, codes_t, commitment, usage


class NeuralCodec(nn.Module):
    """Encoder + residual quantizer + decoder (the codec parameters)."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.version = CODEC_VERSION
        self.encoder = SEANetEncoder(config)
        self.quantizer = ResidualVectorQuantizer(config)
        self.decoder = SEANetDecoder(config)

    def forward(self, x: torch.Tensor):
        """Training pass on (B, 1, N) audio with N a multiple of the stride."""
        z = self.encoder(x)
        B, D, T = z.shape
        flat = z.transpose(1, 2).reshape(B * T, D)
        quantized, codes, commitment, usage = self.quantizer(flat)
        quantized = quantized.view(B, T, D).transpose(1, 2)
        return self.decoder(quantized), codes.view(B, T, -1), commitment, usage


def _frames_tensor(w: Waveform, cfg: CodecConfig) -> torch.Tensor:
    is_valid, message = validate_waveform(w.samples, w.sample_rate, cfg.sample_rate)
    if not is_valid:
        raise AudioFormatError(message)
    if len(w) < cfg.stride:
        raise AudioFormatError(f"Waveform of {len(w)} samples is shorter than one frame ({cfg.stride})")
    usable = (len(w) // cfg.stride) * cfg.stride
    return torch.from_numpy(np.ascontiguousarray(w.samples[:usable])).view(1, 1, usable)


@torch.no_grad()
def encode(w: Waveform, cfg: CodecConfig, codec: NeuralCodec) -> LatentFrames:
    z = codec.encoder(_frames_tensor(w, cfg))
    return LatentFrames(z[0].t().contiguous())


@torch.no_grad()
def quantize_rvq(z: LatentFrames, codec: NeuralCodec) -> CodeGrid:
    codebooks = codec.quantizer.codebooks()
    if z.dim != codebooks[0].shape[1]:
        raise ShapeMismatchError(f"Latent width {z.dim} != codebook width {codebooks[0].shape[1]}")
    if not torch.isfinite(z.values).all():
        raise NumericalError("Cannot quantize non-finite latents")
    return CodeGrid(rvq_codes(z.values, codebooks).numpy())


@torch.no_grad()
def dequantize_rvq(codes: CodeGrid, codec: NeuralCodec) -> LatentFrames:
    codebooks = codec.quantizer.codebooks()
    if codes.num_codebooks != len(codebooks):
        raise ShapeMismatchError(f"Grid has {codes.num_codebooks} codebooks, codec has {len(codebooks)}")
    codes.check_range(codebooks[0].shape[0])
    return LatentFrames(rvq_lookup(torch.from_numpy(codes.codes), codebooks))


@torch.no_grad()
def decode(z: LatentFrames, cfg: CodecConfig, codec: NeuralCodec) -> Waveform:
    if z.dim != cfg.latent_dim:
        raise ShapeMismatchError(f"Latent width {z.dim} != decoder input width {cfg.latent_dim}")
    audio = codec.decoder(z.values.t().unsqueeze(0))
    return Waveform(audio[0, 0].numpy(), cfg.sample_rate)


def codec_reconstruct(w: Waveform, cfg: CodecConfig, codec: NeuralCodec) -> Waveform:
    """encode -> quantize -> dequantize -> decode; output is floor(len/stride)*stride long.

    Re-encoding the output is not guaranteed to give back the same codes.
    """
    codes = quantize_rvq(encode(w, cfg, codec), codec)
    return decode(dequantize_rvq(codes, codec), cfg, codec)
