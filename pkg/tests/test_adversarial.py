import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from prosody_transfer.adversarial import Discriminator, hinge_losses, sample_windows
from prosody_transfer.exceptions import InvalidInputError
from prosody_transfer.nn_core import LEAKY_SLOPE

from oracles import gradcheck, hinge_direct

D = torch.float64


def t(v):
    return torch.tensor(v, dtype=D)


@pytest.mark.parametrize("real,fake,l_d,l_g", [
    ([1.0], [-1.0], 0.0, 1.0),
    ([0.5], [-2.0], 0.5, 2.0),
    ([-1.0], [1.0], 4.0, -1.0),
])
def test_hinge_examples(real, fake, l_d, l_g):
    assert hinge_direct(real, fake) == (l_d, l_g)
    got_d, got_g = hinge_losses(t(real), t(fake))
    assert got_d.item() == l_d and got_g.item() == l_g


def test_hinge_random_batches_match_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_r, n_f = rng.integers(1, 17, size=2)
        # dyadic values keep every partial sum exact, so equality is well defined
        real = (rng.integers(-40, 40, n_r) / 8.0).tolist()
        fake = (rng.integers(-40, 40, n_f) / 8.0).tolist()
        l_d, l_g = hinge_losses(t(real), t(fake))
        assert (l_d.item(), l_g.item()) == hinge_direct(real, fake)


scores = st.lists(st.floats(-5, 5), min_size=1, max_size=10)


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_hinge_non_negative_and_zero_iff_margins(real, fake):
    l_d = hinge_losses(t(real), t(fake))[0].item()
    assert l_d >= 0
    satisfied = all(r >= 1 for r in real) and all(f <= -1 for f in fake)
    assert (l_d == 0) == satisfied


def test_hinge_saturation_gradient_is_zero():
    real = t([1.5, 0.2, 3.0, -0.4]).requires_grad_()
    fake = t([-2.0, 0.3, -1.7]).requires_grad_()
    hinge_losses(real, fake)[0].backward()
    assert real.grad[0] == 0 and real.grad[2] == 0
    assert fake.grad[0] == 0 and fake.grad[2] == 0
    assert real.grad[1] != 0 and fake.grad[1] != 0
    # finite differences agree on the saturated coordinates
    assert gradcheck(lambda: hinge_losses(real, fake)[0], [real, fake]) < 1e-4


def _disc(**kw):
    torch.manual_seed(0)
    return Discriminator(n_mels=8, window=8, channels=(3, 4, 4, 4), **kw).double()


def test_discriminator_one_scalar_per_window():
    d = _disc()
    out = d(torch.randn(5, 8, 8, dtype=D))
    assert out.shape == (5,) and torch.isfinite(out).all()
    with pytest.raises(InvalidInputError):
        d(torch.randn(5, 7, 8, dtype=D))
    with pytest.raises(InvalidInputError):
        d(torch.randn(8, 8, dtype=D))


def test_zero_gain_attention_is_plain_conv_path():
    d = _disc()
    x = torch.randn(3, 8, 8, dtype=D)
    assert d.attention.gain.item() == 0.0
    h = x.unsqueeze(1)
    for conv in d.convs:
        h = F.leaky_relu(conv(h), LEAKY_SLOPE)
    plain = d.head(h.mean(dim=(2, 3))).squeeze(-1)
    assert torch.equal(d(x), plain)


def test_attention_rows_sum_to_one():
    d = _disc()
    with torch.no_grad():
        d.attention.gain.fill_(0.7)
    d(torch.randn(2, 8, 8, dtype=D))
    attn = d.attention.last_attention
    assert torch.allclose(attn.sum(-1), torch.ones(attn.shape[:-1], dtype=D), atol=1e-6)


def test_discriminator_gradients_finite_difference():
    d = _disc()
    with torch.no_grad():
        d.attention.gain.fill_(0.5)
    x = torch.randn(2, 8, 8, dtype=D, requires_grad=True)
    w = torch.randn(2, dtype=D)
    assert gradcheck(lambda: (d(x) * w).sum(), [x] + list(d.parameters())) < 1e-4


def test_window_equal_length_is_deterministic():
    mel = torch.arange(32 * 2, dtype=D).view(1, 32, 2)
    for seed in range(5):
        wb = sample_windows(mel, torch.tensor([32]), 32, np.random.default_rng(seed))
        assert wb.starts.tolist() == [0] and torch.equal(wb.windows[0], mel[0])


def test_short_utterance_padded_to_window():
    mel = torch.randn(1, 40, 3, dtype=D)
    wb = sample_windows(mel, torch.tensor([10]), 32, np.random.default_rng(0))
    assert wb.windows.shape == (1, 32, 3)
    assert torch.equal(wb.windows[0, :10], mel[0, :10])
    valid = {tuple(r.tolist()) for r in mel[0, :10]}
    assert all(tuple(r.tolist()) in valid for r in wb.windows[0])
    single = sample_windows(mel, torch.tensor([1]), 32, np.random.default_rng(0))
    assert torch.equal(single.windows[0], mel[0, :1].expand(32, -1))


def test_window_starts_uniform():
    rng = np.random.default_rng(123)
    mel = torch.zeros(1, 100, 1)
    starts = np.concatenate([sample_windows(mel, torch.tensor([100]), 32, rng, per_utterance=100).starts
                             for _ in range(100)])
    assert starts.min() >= 0 and starts.max() <= 68
    counts = np.bincount(starts, minlength=69)
    assert chisquare(counts).pvalue > 0.01


def test_windows_stay_inside_valid_frames_and_carry_gradients():
    mel = torch.randn(2, 50, 4, dtype=D, requires_grad=True)
    lengths = torch.tensor([37, 50])
    wb = sample_windows(mel, lengths, 32, np.random.default_rng(1), per_utterance=8)
    assert wb.windows.shape == (16, 32, 4)
    assert all(s + 32 <= 37 for s in wb.starts[:8])
    wb.windows.sum().backward()
    assert torch.all(mel.grad[0, 37:] == 0)
    assert mel.grad.sum() > 0
