"""
Next-token selection: guidance mixing over probabilities and nucleus sampling.
"""

import numpy as np
import torch

from .config import SamplerParams
from .errors import GenerationError, ShapeMismatchError
from .phonemes import PhonemeSeq

# cumulative mass comparisons tolerate summation error at the nucleus boundary
TOP_P_TOLERANCE = 1e-12


def cfg_mix(p_cond: torch.Tensor, p_uncond: torch.Tensor, gamma: float) -> torch.Tensor:
    """max(0, gamma * p_cond + (1 - gamma) * p_uncond), renormalized over the last axis.

    gamma == 1 returns ``p_cond`` unchanged; rows whose mass clamps away entirely fall back to ``p_cond``.
    """
    if p_cond.shape != p_uncond.shape:
        raise ShapeMismatchError(f"Distribution supports differ: {tuple(p_cond.shape)} vs {tuple(p_uncond.shape)}")
    p_cond = p_cond.double()
    if gamma == 1.0:
        return p_cond
    mixed = (gamma * p_cond + (1.0 - gamma) * p_uncond.double()).clamp_min(0.0)
    total = mixed.sum(dim=-1, keepdim=True)
    return torch.where(total > 0, mixed / total.clamp_min(torch.finfo(torch.float64).tiny), p_cond)


def nucleus_filter(dist: torch.Tensor, top_p: float, temperature: float = 1.0) -> torch.Tensor:
    """Tempered, top-p truncated and renormalized copy of a 1-D distribution (float64)."""
    p = dist.double()
    if p.dim() != 1:
        raise ShapeMismatchError(f"Expected a 1-D distribution, got shape {tuple(p.shape)}")
    if bool((p < 0).any()) or not bool(torch.isfinite(p).all()) or float(p.sum()) <= 0.0:
        raise GenerationError("Cannot sample from a degenerate distribution")
    if temperature != 1.0:
        # softmax(log p / T) without leaving probability space
        p = p.pow(1.0 / temperature)
    p = p / p.sum()
    if top_p >= 1.0:
        return p

    sorted_p, order = torch.sort(p, descending=True, stable=True)
    mass_before = torch.cat([sorted_p.new_zeros(1), torch.cumsum(sorted_p, dim=0)[:-1]])
    keep_sorted = mass_before < top_p - TOP_P_TOLERANCE
    keep = torch.zeros_like(keep_sorted)
    keep[order] = keep_sorted
    filtered = torch.where(keep, p, torch.zeros_like(p))
    return filtered / filtered.sum()


def nucleus_sample(dist: torch.Tensor, sp: SamplerParams, generator: torch.Generator) -> int:
    filtered = nucleus_filter(dist, sp.top_p, sp.temperature)
    return int(torch.multinomial(filtered, 1, generator=generator))


def random_unconditional(y: PhonemeSeq, num_special: int, vocab_size: int,
                         rng: np.random.Generator) -> PhonemeSeq:
    """Random phoneme sequence of the same length, ids uniform over the non-special symbols."""
    if vocab_size <= num_special:
        raise GenerationError("Phoneme vocabulary holds no regular symbols")
    return PhonemeSeq(rng.integers(num_special, vocab_size, size=len(y)))
