"""
Causal decoder-only transformer over delay-stacked codec tokens.

The attention sequence is [phonemes | audio rows]. Each audio row embeds as the
sum of its K per-channel token embeddings, and K separate MLP heads predict the
K channels of the next row. Logits for audio row t see only the phonemes and
rows < t.
"""

from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ARConfig
from .errors import LayoutError, ShapeMismatchError, VocabularyError

AR_VERSION = "ar-v1"

DEFAULT_CODEBOOK_WEIGHTS: Tuple[float, ...] = ARConfig.model_fields["codebook_weights"].default


class DecoderLayer(nn.Module):
    def __init__(self, hidden_size: int, num_heads: int, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.dropout = dropout
        self.norm1 = nn.LayerNorm(hidden_size)
        self.qkv = nn.Linear(hidden_size, 3 * hidden_size)
        self.proj = nn.Linear(hidden_size, hidden_size)
        self.norm2 = nn.LayerNorm(hidden_size)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_size, 4 * hidden_size),
            nn.GELU(),
            nn.Linear(4 * hidden_size, hidden_size),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        B, N, H = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(B, N, 3, self.num_heads, H // self.num_heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask,
                                           dropout_p=self.dropout if self.training else 0.0)
        x = x + self.proj(a.transpose(1, 2).reshape(B, N, H))
        return x + self.mlp(self.norm2(x))


def _head(hidden_size: int, vocab_size: int, depth: int) -> nn.Sequential:
    layers = []
    for _ in range(depth - 1):
        layers += [nn.Linear(hidden_size, hidden_size), nn.GELU()]
    out = nn.Linear(hidden_size, vocab_size)
    nn.init.normal_(out.weight, std=0.02)
    nn.init.zeros_(out.bias)
    return nn.Sequential(*layers, out)


class ARModel(nn.Module):
    def __init__(self, config: ARConfig):
        super().__init__()
        self.config = config
        self.version = AR_VERSION
        vocab = config.token_vocab_size
        self.phoneme_embed = nn.Embedding(config.phoneme_vocab_size, config.hidden_size)
        self.token_embeds = nn.ModuleList(
            [nn.Embedding(vocab, config.hidden_size) for _ in range(config.num_codebooks)]
        )
        self.pos_embed = nn.Embedding(config.max_seq_len, config.hidden_size)
        self.layers = nn.ModuleList(
            [DecoderLayer(config.hidden_size, config.num_heads, config.dropout) for _ in range(config.num_layers)]
        )
        self.norm = nn.LayerNorm(config.hidden_size)
        self.heads = nn.ModuleList(
            [_head(config.hidden_size, vocab, config.head_layers) for _ in range(config.num_codebooks)]
        )

    def _check_inputs(self, phonemes: torch.Tensor, tokens: torch.Tensor) -> None:
        cfg = self.config
        if tokens.dim() != 3 or tokens.shape[-1] != cfg.num_codebooks:
            raise ShapeMismatchError(f"Expected (B, S, {cfg.num_codebooks}) tokens, got {tuple(tokens.shape)}")
        if phonemes.dim() != 2 or phonemes.shape[0] != tokens.shape[0] or phonemes.shape[1] < 1:
            raise ShapeMismatchError(f"Expected (B, L>=1) phonemes, got {tuple(phonemes.shape)}")
        if phonemes.min() < 0 or phonemes.max() >= cfg.phoneme_vocab_size:
            raise VocabularyError(f"Phoneme id outside vocabulary of size {cfg.phoneme_vocab_size}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= cfg.token_vocab_size):
            raise VocabularyError(f"Token id outside vocabulary of size {cfg.token_vocab_size}")

    def _hidden(self, phonemes: torch.Tensor, tokens: torch.Tensor, phoneme_mask: Optional[torch.Tensor],
                token_mask: Optional[torch.Tensor]) -> torch.Tensor:
        B, L = phonemes.shape
        S = tokens.shape[1]
        if L + S > self.config.max_seq_len:
            raise ShapeMismatchError(f"Sequence of {L + S} positions exceeds max_seq_len {self.config.max_seq_len}")
        if phoneme_mask is None:
            phoneme_mask = torch.ones(B, L, dtype=torch.bool, device=phonemes.device)
        if token_mask is None:
            token_mask = torch.ones(B, S, dtype=torch.bool, device=tokens.device)
        valid = torch.cat([phoneme_mask, token_mask], dim=1)

        x = self.phoneme_embed(phonemes)
        if S:
            audio = sum(embed(tokens[..., k]) for k, embed in enumerate(self.token_embeds))
            x = torch.cat([x, audio], dim=1)
        positions = (valid.long().cumsum(dim=1) - 1).clamp_min(0)
        x = x + self.pos_embed(positions)

        N = L + S
        causal = torch.ones(N, N, dtype=torch.bool, device=x.device).tril()
        eye = torch.eye(N, dtype=torch.bool, device=x.device)
        # padded keys are invisible; every row keeps its own position so no row is empty
        attn_mask = (causal & valid[:, None, :]) | eye
        attn_mask = attn_mask[:, None, :, :]
        for layer in self.layers:
            x = layer(x, attn_mask)
        return self.norm(x)

    def _project(self, h: torch.Tensor) -> torch.Tensor:
        return torch.stack([head(h) for head in self.heads], dim=-2)

    def forward(self, phonemes: torch.Tensor, tokens: torch.Tensor, phoneme_mask: Optional[torch.Tensor] = None,
                token_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Teacher-forced logits for every row of a delayed grid.

        Args:
            phonemes: (B, L) ids, left-padded when batched
            tokens: (B, S, K) delayed token grid, right-padded when batched
        Returns:
            (B, S, K, vocab) logits; row t is predicted from phonemes and rows < t
        """
        self._check_inputs(phonemes, tokens)
        L = phonemes.shape[1]
        inputs = tokens[:, :-1]
        input_mask = token_mask[:, :-1] if token_mask is not None else None
        h = self._hidden(phonemes, inputs, phoneme_mask, input_mask)
        return self._project(h[:, L - 1:])

    def next_logits(self, phonemes: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        """(B, K, vocab) logits for the row after ``prefix`` (B, t, K); t may be 0."""
        self._check_inputs(phonemes, prefix)
        h = self._hidden(phonemes, prefix, None, None)
        return self._project(h[:, -1])


def weighted_nll_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor,
                      weights: Sequence[float] = DEFAULT_CODEBOOK_WEIGHTS) -> torch.Tensor:
    """Masked NLL, channel k weighted by ``weights[k]``, normalized by the total mask weight.

    Args:
        logits: (..., K, V)
        targets: (..., K)
        mask: (..., K) bool; False positions contribute exactly zero gradient
    """
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeMismatchError(f"Shapes disagree: logits {tuple(logits.shape)}, targets "
                                 f"{tuple(targets.shape)}, mask {tuple(mask.shape)}")
    num_codebooks = targets.shape[-1]
    if len(weights) != num_codebooks:
        raise ShapeMismatchError(f"{len(weights)} weights for {num_codebooks} codebooks")
    if not bool(mask.any()):
        raise LayoutError("Loss mask is all false: nothing to train on")
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device).expand_as(targets)
    log_probs = F.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, targets.clamp(0, logits.shape[-1] - 1).unsqueeze(-1)).squeeze(-1)
    weighted = torch.where(mask, nll * w, torch.zeros_like(nll))
    total_weight = torch.where(mask, w, torch.zeros_like(w)).sum()
    if float(total_weight) <= 0:
        raise LayoutError("Loss mask carries zero total weight")
    return weighted.sum() / total_weight
