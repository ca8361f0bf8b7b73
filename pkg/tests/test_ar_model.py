import numpy as np
import pytest
import torch
import torch.nn.functional as F

from codecedit.ar_model import DEFAULT_CODEBOOK_WEIGHTS, ARModel, weighted_nll_loss
from codecedit.ar_trainer import collate, make_example, special_vocab, TokenizedUtterance
from codecedit.codec import CodeGrid
from codecedit.errors import LayoutError, ShapeMismatchError, VocabularyError
from codecedit.phonemes import PhonemeSeq


def _batch(ar_config, num_frames=14, seed=0, batch=2):
    rng = np.random.default_rng(seed)
    sv = special_vocab(ar_config)
    examples = []
    for b in range(batch):
        codes = CodeGrid(rng.integers(0, ar_config.codebook_size, size=(num_frames + 3 * b, ar_config.num_codebooks)))
        utt = TokenizedUtterance(f"u{b}", codes, PhonemeSeq(rng.integers(3, 20, size=5 + b)))
        examples.append(make_example(utt, sv, rng))
    return collate(examples, sv, phoneme_pad=0)


def test_forward_shape(ar_model, ar_config):
    phonemes, tokens, phoneme_mask, token_mask, _ = _batch(ar_config)
    logits = ar_model(phonemes, tokens, phoneme_mask, token_mask)
    assert logits.shape == (*tokens.shape, ar_config.token_vocab_size)


def test_rejects_bad_inputs(ar_model, ar_config):
    tokens = torch.zeros(1, 5, ar_config.num_codebooks, dtype=torch.long)
    with pytest.raises(ShapeMismatchError):
        ar_model(torch.zeros(1, 3, dtype=torch.long), tokens[..., :2])
    with pytest.raises(VocabularyError):
        ar_model(torch.full((1, 3), ar_config.phoneme_vocab_size), tokens)
    with pytest.raises(VocabularyError):
        ar_model(torch.zeros(1, 3, dtype=torch.long), tokens + ar_config.token_vocab_size)
    with pytest.raises(ShapeMismatchError, match="max_seq_len"):
        ar_model(torch.zeros(1, 3, dtype=torch.long),
                 torch.zeros(1, ar_config.max_seq_len, ar_config.num_codebooks, dtype=torch.long))


@pytest.mark.parametrize("case", range(50))
def test_logits_do_not_see_later_rows(ar_model, ar_config, case):
    gen = torch.Generator().manual_seed(case)
    vocab = ar_config.token_vocab_size
    S = int(torch.randint(3, 24, (1,), generator=gen))
    phonemes = torch.randint(0, ar_config.phoneme_vocab_size, (1, 6), generator=gen)
    tokens = torch.randint(0, vocab, (1, S, ar_config.num_codebooks), generator=gen)
    t = int(torch.randint(0, S, (1,), generator=gen))
    perturbed = tokens.clone()
    perturbed[0, t] = (perturbed[0, t] + 1 + torch.randint(0, vocab - 1, (ar_config.num_codebooks,),
                                                          generator=gen)) % vocab
    with torch.no_grad():
        a = ar_model(phonemes, tokens)
        b = ar_model(phonemes, perturbed)
    torch.testing.assert_close(a[:, :t + 1], b[:, :t + 1], atol=1e-6, rtol=0)


def test_next_logits_match_teacher_forcing(ar_model, ar_config):
    phonemes, tokens, _, _, _ = _batch(ar_config, batch=1)
    with torch.no_grad():
        full = ar_model(phonemes, tokens)
        for t in (0, 3, tokens.shape[1] - 1):
            step = ar_model.next_logits(phonemes, tokens[:, :t])
            torch.testing.assert_close(step, full[:, t], atol=1e-5, rtol=1e-5)


def test_left_padded_phonemes_do_not_change_logits(ar_model, ar_config):
    gen = torch.Generator().manual_seed(3)
    phonemes = torch.randint(3, 20, (1, 5), generator=gen)
    tokens = torch.randint(0, ar_config.codebook_size, (1, 9, ar_config.num_codebooks), generator=gen)
    padded = torch.cat([torch.zeros(1, 3, dtype=torch.long), phonemes], dim=1)
    mask = torch.tensor([[False] * 3 + [True] * 5])
    with torch.no_grad():
        plain = ar_model(phonemes, tokens)
        shifted = ar_model(padded, tokens, phoneme_mask=mask)
    torch.testing.assert_close(plain, shifted, atol=1e-5, rtol=1e-5)


@pytest.mark.parametrize("seed", range(100))
def test_loss_gradient_is_zero_outside_the_mask(ar_config, seed):
    phonemes, tokens, phoneme_mask, token_mask, mask = _batch(ar_config, seed=seed)
    logits = torch.randn(*tokens.shape, ar_config.token_vocab_size, generator=torch.Generator().manual_seed(seed),
                         requires_grad=True)
    loss = weighted_nll_loss(logits, tokens, mask, ar_config.codebook_weights)
    loss.backward()
    grad = logits.grad
    assert torch.all(grad[~mask] == 0)
    assert torch.any(grad[mask] != 0)


def test_loss_finite_difference_outside_mask(ar_config):
    phonemes, tokens, _, _, mask = _batch(ar_config, seed=5, batch=1)
    logits = torch.randn(*tokens.shape, ar_config.token_vocab_size, dtype=torch.float64)
    base = weighted_nll_loss(logits, tokens, mask, ar_config.codebook_weights)
    outside = (~mask).nonzero()[:20]
    for idx in outside:
        bumped = logits.clone()
        bumped[tuple(idx.tolist())] += 1e-3
        assert abs(float(weighted_nll_loss(bumped, tokens, mask, ar_config.codebook_weights) - base)) < 1e-6


def test_loss_weights_and_normalization():
    logits = torch.zeros(1, 2, 2, 4)
    targets = torch.zeros(1, 2, 2, dtype=torch.long)
    mask = torch.tensor([[[True, True], [True, False]]])
    loss = weighted_nll_loss(logits, targets, mask, (5.0, 1.0))
    assert float(loss) == pytest.approx(np.log(4.0))


def test_loss_rejects_empty_mask_and_bad_shapes():
    logits = torch.zeros(1, 2, 2, 4)
    targets = torch.zeros(1, 2, 2, dtype=torch.long)
    with pytest.raises(LayoutError):
        weighted_nll_loss(logits, targets, torch.zeros(1, 2, 2, dtype=torch.bool), (1.0, 1.0))
    with pytest.raises(ShapeMismatchError):
        weighted_nll_loss(logits, targets, torch.ones(1, 2, 2, dtype=torch.bool), (1.0,))
    with pytest.raises(ShapeMismatchError):
        weighted_nll_loss(logits[..., :1, :], targets, torch.ones(1, 2, 2, dtype=torch.bool), (1.0, 1.0))


def test_untrained_loss_starts_near_uniform(ar_config):
    torch.manual_seed(0)
    model = ARModel(ar_config)
    phonemes, tokens, phoneme_mask, token_mask, mask = _batch(ar_config, num_frames=30, batch=4)
    with torch.no_grad():
        loss = weighted_nll_loss(model(phonemes, tokens, phoneme_mask, token_mask), tokens, mask)
    expected = np.log(ar_config.token_vocab_size)
    assert abs(float(loss) - expected) <= 0.05 * expected


def test_unit_weights_give_plain_masked_cross_entropy():
    torch.manual_seed(3)
    logits = torch.randn(2, 7, 4, 11)
    targets = torch.randint(0, 11, (2, 7, 4))
    mask = torch.rand(2, 7, 4) > 0.4
    loss = weighted_nll_loss(logits, targets, mask, (1.0, 1.0, 1.0, 1.0))
    expected = F.cross_entropy(logits[mask], targets[mask])
    assert float(loss) == pytest.approx(float(expected), rel=1e-5)


def test_default_weights_come_from_the_config():
    logits = torch.zeros(1, 1, 4, 5)
    logits[0, 0, 0, 0] = 4.0
    targets = torch.zeros(1, 1, 4, dtype=torch.long)
    mask = torch.ones(1, 1, 4, dtype=torch.bool)
    assert DEFAULT_CODEBOOK_WEIGHTS == (5.0, 1.0, 0.5, 0.1)
    assert float(weighted_nll_loss(logits, targets, mask)) == pytest.approx(
        float(weighted_nll_loss(logits, targets, mask, DEFAULT_CODEBOOK_WEIGHTS)))
