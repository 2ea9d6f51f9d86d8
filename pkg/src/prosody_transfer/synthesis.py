"""Phoneme encoder, parallel decoder and the full generator pass with its
negative-ELBO training loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .exceptions import AlignmentError, InvalidInputError
from .nn_core import BiGRU, ConvStack1d, dense, lengths_to_mask
from .reference_encoder import EncoderConfig, ProsodyLatent, ReferenceEncoder


@dataclass
class GeneratorConfig:
    n_mels: int = 80
    num_phonemes: int = 12
    speaker_dim: int = 64
    phoneme_embedding: int = 128
    phoneme_conv: tuple[int, ...] = (128, 128, 128)
    phoneme_gru: int = 128
    decoder_conv: tuple[int, ...] = (256, 256, 256)
    decoder_gru: int = 256
    kernel_size: int = 5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.phoneme_conv = tuple(self.phoneme_conv)
        self.decoder_conv = tuple(self.decoder_conv)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phoneme_conv"] = list(self.phoneme_conv)
        d["decoder_conv"] = list(self.decoder_conv)
        d["encoder"]["conv_channels"] = list(self.encoder.conv_channels)
        return d


class PhonemeEncoder(nn.Module):
    """Embedding lookup, three convs and a bi-GRU over upsampled phoneme ids."""

    def __init__(self, num_phonemes: int, embedding: int = 128, channels=(128, 128, 128),
                 kernel_size: int = 5, gru_width: int = 128):
        super().__init__()
        self.num_phonemes = num_phonemes
        self.embedding = nn.Embedding(num_phonemes, embedding)
        nn.init.normal_(self.embedding.weight, std=0.3)
        self.convs = ConvStack1d(embedding, channels, kernel_size)
        self.gru = BiGRU(self.convs.out_channels, gru_width // 2)
        self.out_dim = 2 * (gru_width // 2)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.num_phonemes):
            raise InvalidInputError(f"phoneme ids must lie in [0, {self.num_phonemes})")
        return self.gru(self.convs(self.embedding(ids), lengths), lengths)


class ParallelDecoder(nn.Module):
    """Emits every frame at once from ``[y_t, z_hat_t, e]``; no output feedback."""

    def __init__(self, phoneme_dim: int, latent_dim: int, speaker_dim: int, n_mels: int,
                 channels=(256, 256, 256), kernel_size: int = 5, gru_width: int = 256):
        super().__init__()
        self.convs = ConvStack1d(phoneme_dim + latent_dim + speaker_dim, channels, kernel_size)
        self.gru = BiGRU(self.convs.out_channels, gru_width // 2)
        self.head = dense(2 * (gru_width // 2), n_mels)

    def forward(self, y: torch.Tensor, z_hat: torch.Tensor, e: torch.Tensor,
                lengths: torch.Tensor | None = None) -> torch.Tensor:
        if y.shape[1] != z_hat.shape[1]:
            raise AlignmentError(f"phoneme encodings have {y.shape[1]} frames, latent {z_hat.shape[1]}")
        cond = e.unsqueeze(1).expand(-1, y.shape[1], -1)
        h = self.gru(self.convs(torch.cat([y, z_hat, cond], dim=-1), lengths), lengths)
        out = self.head(h)
        if lengths is not None:
            out = out * lengths_to_mask(lengths, out.shape[1]).unsqueeze(-1).to(out.dtype)
        return out


@dataclass
class GeneratorOutput:
    x_hat: torch.Tensor
    latent: ProsodyLatent
    reconstruction: torch.Tensor  # masked mean |x_hat - x| per element
    kl: torch.Tensor              # summed per-frame KL, averaged per valid frame
    l1_sum: torch.Tensor = field(repr=False)
    kl_sum: torch.Tensor = field(repr=False)
    n_elements: torch.Tensor = field(repr=False)

    def loss(self, alpha: float, recon_scale: float = 1.0) -> torch.Tensor:
        """Negative ELBO per valid mel element under a fixed-scale Laplace likelihood."""
        return (self.l1_sum / recon_scale + alpha * self.kl_sum) / self.n_elements


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        self.phoneme_encoder = PhonemeEncoder(config.num_phonemes, config.phoneme_embedding,
                                              config.phoneme_conv, config.kernel_size, config.phoneme_gru)
        pdim = self.phoneme_encoder.out_dim
        self.reference_encoder = ReferenceEncoder(config.n_mels, pdim, config.speaker_dim, config.encoder)
        self.decoder = ParallelDecoder(pdim, config.encoder.latent_dim, config.speaker_dim, config.n_mels,
                                       config.decoder_conv, config.kernel_size, config.decoder_gru)

    def encode(self, x_ref, phonemes, e_enc, lengths=None, deterministic=True, generator=None):
        y = self.phoneme_encoder(phonemes, lengths)
        return y, self.reference_encoder(x_ref, y, e_enc, lengths, deterministic, generator)

    def forward(self, x_ref: torch.Tensor, phonemes: torch.Tensor, e_enc: torch.Tensor,
                e_dec: torch.Tensor | None = None, lengths: torch.Tensor | None = None,
                deterministic: bool = False, generator: torch.Generator | None = None) -> GeneratorOutput:
        """Reconstruct (``e_dec`` omitted, so it equals ``e_enc``) or transfer.

        Args:
            x_ref: ``B x T x M`` normalised reference mel.
            phonemes: ``B x T`` upsampled phoneme ids.
            e_enc: ``B x S`` embedding fed to the reference encoder.
            e_dec: ``B x S`` embedding fed to the decoder.
        """
        if phonemes.shape[:2] != x_ref.shape[:2]:
            raise AlignmentError(f"phonemes {tuple(phonemes.shape)} vs mel {tuple(x_ref.shape)}")
        if e_dec is None:
            e_dec = e_enc
        if lengths is None:
            lengths = torch.full((x_ref.shape[0],), x_ref.shape[1], dtype=torch.long)
        y, latent = self.encode(x_ref, phonemes, e_enc, lengths, deterministic, generator)
        x_hat = self.decoder(y, latent.z_hat, e_dec, lengths)
        mask = lengths_to_mask(lengths, x_ref.shape[1]).unsqueeze(-1).to(x_ref.dtype)
        l1_sum = ((x_hat - x_ref).abs() * mask).sum()
        kl_sum = latent.kl_per_frame().sum()
        n_frames = lengths.sum().to(x_ref.dtype)
        n_elements = n_frames * x_ref.shape[-1]
        return GeneratorOutput(x_hat, latent, l1_sum / n_elements, kl_sum / n_frames,
                               l1_sum, kl_sum, n_elements)
