import inspect

import pytest
import torch

from prosody_transfer.exceptions import AlignmentError, InvalidInputError
from prosody_transfer.reference_encoder import EncoderConfig
from prosody_transfer.synthesis import Generator, GeneratorConfig, ParallelDecoder, PhonemeEncoder

from oracles import gradcheck

D = torch.float64

SMALL = GeneratorConfig(n_mels=8, num_phonemes=5, speaker_dim=3, phoneme_embedding=6, phoneme_conv=(6, 6, 6),
                        phoneme_gru=6, decoder_conv=(8, 8, 8), decoder_gru=8, kernel_size=3,
                        encoder=EncoderConfig(latent_dim=4, tau=3, conv_channels=(6, 6, 6), kernel_size=3))


def _gen():
    torch.manual_seed(0)
    return Generator(SMALL).double()


def _batch(t_len=10, b=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, t_len, 8, generator=g, dtype=D)
    ids = torch.randint(0, 5, (b, t_len), generator=g)
    e = torch.randn(b, 3, generator=g, dtype=D)
    return x, ids, e


def test_phoneme_encoder_shape_and_lookup():
    torch.manual_seed(1)
    enc = PhonemeEncoder(5, 6, (6,), 3, 6).double()
    ids = torch.tensor([[0, 3, 3, 1, 3]])
    assert enc(ids).shape == (1, 5, 6)
    emb = enc.embedding(ids)
    assert torch.equal(emb[0, 1], emb[0, 2]) and torch.equal(emb[0, 1], emb[0, 4])


def test_phoneme_encoder_label_permutation_symmetry():
    torch.manual_seed(2)
    enc = PhonemeEncoder(5, 6, (6, 6), 3, 6).double()
    ids = torch.tensor([[0, 1, 2, 2, 4, 3, 1]])
    perm = torch.tensor([3, 0, 4, 1, 2])  # old id i becomes perm[i]
    before = enc(ids)
    with torch.no_grad():
        w = enc.embedding.weight.clone()
        enc.embedding.weight[perm] = w
    assert torch.allclose(enc(perm[ids]), before, atol=1e-12)


def test_phoneme_encoder_range_check():
    enc = PhonemeEncoder(5, 6, (6,), 3, 6)
    with pytest.raises(InvalidInputError):
        enc(torch.tensor([[0, 5]]))
    with pytest.raises(InvalidInputError):
        enc(torch.tensor([[-1, 2]]))


def test_decoder_shape_and_alignment_check():
    torch.manual_seed(3)
    dec = ParallelDecoder(6, 4, 3, 8, (8,), 3, 8).double()
    y, z, e = torch.randn(2, 9, 6, dtype=D), torch.randn(2, 9, 4, dtype=D), torch.randn(2, 3, dtype=D)
    assert dec(y, z, e).shape == (2, 9, 8)
    with pytest.raises(AlignmentError):
        dec(y, z[:, :-1], e)


def test_decoder_has_no_output_feedback():
    assert list(inspect.signature(ParallelDecoder.forward).parameters) == ["self", "y", "z_hat", "e", "lengths"]
    torch.manual_seed(4)
    dec = ParallelDecoder(6, 4, 3, 8, (8,), 3, 8).double()
    y, z, e = torch.randn(1, 9, 6, dtype=D), torch.randn(1, 9, 4, dtype=D), torch.randn(1, 3, dtype=D)
    first = dec(y, z, e)
    emitted = first.clone()
    emitted[:, 4] = 0.0  # tamper with an emitted frame; nothing reads it back
    again = dec(y, z, e)
    assert torch.equal(first, again)
    yr = y.clone().requires_grad_()
    out = dec(yr, z, e)
    g = torch.autograd.grad(out[0, 0].sum(), yr)[0]
    assert g[0, 8].abs().sum() > 0  # bi-GRU context reaches forward in time as well


def test_generator_smoke_backward_populates_all():
    gen = _gen()
    x, ids, e = _batch()
    out = gen(x, ids, e, generator=torch.Generator().manual_seed(0))
    loss = out.loss(alpha=0.5)
    assert torch.isfinite(loss)
    loss.backward()
    for name, p in gen.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name


def test_reconstruction_mode_uses_same_embedding():
    gen = _gen()
    x, ids, e = _batch()
    a = gen(x, ids, e, deterministic=True)
    b = gen(x, ids, e, e_dec=e, deterministic=True)
    assert torch.equal(a.x_hat, b.x_hat)
    c = gen(x, ids, e, e_dec=e + 1.0, deterministic=True)
    assert torch.equal(c.latent.z_hat, a.latent.z_hat)
    delta = (c.x_hat - a.x_hat).abs().amax(dim=-1)
    assert torch.all(delta > 0)


def test_loss_is_negative_elbo_per_element():
    gen = _gen()
    x, ids, e = _batch()
    out = gen(x, ids, e, deterministic=True)
    l1 = (out.x_hat - x).abs().sum()
    kl = out.latent.kl_per_frame().sum()
    n = x.shape[1] * x.shape[2]
    assert torch.allclose(out.loss(0.3, 2.0), (l1 / 2.0 + 0.3 * kl) / n)
    assert torch.allclose(out.reconstruction, l1 / n)
    assert torch.allclose(out.kl, kl / x.shape[1])
    assert out.kl >= 0


def test_padding_contributes_nothing():
    gen = _gen()
    x, ids, e = _batch(12, b=2, seed=5)
    x[0, 8:] = 1e3
    ids[0, 8:] = 0
    both = gen(x, ids, e, lengths=torch.tensor([8, 12]), deterministic=True)
    a = gen(x[:1, :8], ids[:1, :8], e[:1], deterministic=True)
    b = gen(x[1:], ids[1:], e[1:], deterministic=True)
    assert torch.allclose(both.l1_sum, a.l1_sum + b.l1_sum, atol=1e-9)
    assert torch.allclose(both.kl_sum, a.kl_sum + b.kl_sum, atol=1e-9)
    assert both.n_elements.item() == 20 * 8


def test_alignment_error():
    gen = _gen()
    x, ids, e = _batch()
    with pytest.raises(AlignmentError):
        gen(x, ids[:, :-1], e)


def test_decoder_gradients_finite_difference():
    torch.manual_seed(5)
    dec = ParallelDecoder(4, 4, 3, 5, (4, 4, 4), 3, 6).double()
    y, z, e = (torch.randn(*s, dtype=D, requires_grad=True) for s in ((1, 8, 4), (1, 8, 4), (1, 3)))
    w = torch.randn(1, 8, 5, dtype=D)
    assert gradcheck(lambda: (dec(y, z, e) * w).sum(), [y, z, e] + list(dec.parameters())) < 1e-4


def test_generator_gradients_finite_difference():
    gen = _gen()
    x, ids, e = _batch(7)
    x.requires_grad_()
    e.requires_grad_()

    def loss():
        return gen(x, ids, e, deterministic=True).loss(0.7)

    assert gradcheck(loss, [x, e] + list(gen.parameters()), max_coords=40) < 1e-4
