import math
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

STFT_SIZES = (256, 512, 1024)
SILENT_ENERGY = 1e-6


class ReconstructionLoss(NamedTuple):
    total: torch.Tensor
    l1: torch.Tensor
    spectral: torch.Tensor
    si_snr: torch.Tensor


def multi_resolution_stft_loss(estimate: torch.Tensor, target: torch.Tensor,
                               fft_sizes: Sequence[int] = STFT_SIZES, eps: float = 1e-3) -> torch.Tensor:
    """Mean L1 distance between log-magnitude spectrograms over several resolutions.

    Inputs are (B, 1, N) or (B, N).
    """
    estimate = estimate.reshape(estimate.shape[0], -1)
    target = target.reshape(target.shape[0], -1)
    total = estimate.new_zeros(())
    for n_fft in fft_sizes:
        window = torch.hann_window(n_fft, device=estimate.device, dtype=estimate.dtype)
        spec_est = torch.stft(estimate, n_fft, hop_length=n_fft // 4, window=window, return_complex=True)
        spec_ref = torch.stft(target, n_fft, hop_length=n_fft // 4, window=window, return_complex=True)
        total = total + F.l1_loss(torch.log(spec_est.abs() + eps), torch.log(spec_ref.abs() + eps))
    return total / len(fft_sizes)


def si_snr_loss(estimate: torch.Tensor, target: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Negative scale-invariant SNR in bels (dB / 10), averaged over the non-silent batch items.

    Silent targets carry no phase to match and are left out; an all-silent batch gives 0.
    """
    est = estimate.reshape(estimate.shape[0], -1)
    ref = target.reshape(target.shape[0], -1)
    est = est - est.mean(dim=-1, keepdim=True)
    ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_energy = ref.pow(2).sum(dim=-1)
    voiced = ref_energy > SILENT_ENERGY * ref.shape[-1]
    if not bool(voiced.any()):
        return est.new_zeros(())
    est, ref, ref_energy = est[voiced], ref[voiced], ref_energy[voiced]
    projection = ((est * ref).sum(dim=-1) / ref_energy).unsqueeze(-1) * ref
    noise = est - projection
    ratio = (projection.pow(2).sum(dim=-1) + eps) / (noise.pow(2).sum(dim=-1) + eps)
    return -torch.log10(ratio).mean()


def reconstruction_loss(estimate: torch.Tensor, target: torch.Tensor, l1_weight: float = 1.0,
                        spectral_weight: float = 0.1, si_snr_weight: float = 1.0) -> ReconstructionLoss:
    """Weighted waveform L1, log-spectral distance and negative SI-SNR."""
    l1 = F.l1_loss(estimate, target)
    spectral = multi_resolution_stft_loss(estimate, target)
    si_snr = si_snr_loss(estimate, target)
    total = l1_weight * l1 + spectral_weight * spectral + si_snr_weight * si_snr
    return ReconstructionLoss(total, l1, spectral, si_snr)


def warmup_cosine(step: int, warmup_steps: int, total_steps: int) -> float:
    """Learning-rate multiplier: linear warmup then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))
