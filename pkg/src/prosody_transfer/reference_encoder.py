"""Reference encoder: instance-normalised convs, bi-GRU, conditional
variational posterior and the fixed-rate temporal bottleneck."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .exceptions import AlignmentError, InvalidConfigError, InvalidInputError
from .nn_core import BiGRU, ConvStack1d, dense, kl_diag_std_normal, lengths_to_mask


@dataclass
class EncoderConfig:
    latent_dim: int = 64
    tau: int = 8
    conv_channels: tuple[int, ...] = (128, 128, 128)
    kernel_size: int = 5

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.latent_dim < 2 or self.latent_dim % 2:
            raise InvalidConfigError(f"latent_dim must be even, got {self.latent_dim}")
        if self.tau < 1:
            raise InvalidConfigError(f"tau must be >= 1, got {self.tau}")


@dataclass
class ProsodyLatent:
    """All ``B x T x H`` intermediates of one encoder pass."""

    z_in: torch.Tensor
    post_mean: torch.Tensor
    post_logvar: torch.Tensor
    z: torch.Tensor
    z_hat: torch.Tensor
    mask: torch.Tensor = field(repr=False)

    def kl_per_frame(self) -> torch.Tensor:
        """``B x T`` KL to the standard normal prior, zero on padding."""
        return kl_diag_std_normal(self.post_mean, self.post_logvar) * self.mask.to(self.z.dtype)


def bottleneck_indices(n_frames: int, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """Frames kept by the bottleneck for the forward and backward halves.

    Forward keeps the last frame of every block of ``tau`` (clamped to the
    final frame for a partial block), backward keeps the first.
    """
    if tau < 1:
        raise InvalidConfigError(f"tau must be >= 1, got {tau}")
    blocks = np.arange(math.ceil(n_frames / tau))
    forward = np.minimum(blocks * tau + tau - 1, n_frames - 1)
    return forward, blocks * tau


def temporal_bottleneck(z: torch.Tensor, tau: int, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Downsample ``z`` at rate ``tau`` and replicate back to its length.

    Args:
        z: ``T x H`` or ``B x T x H``; the first ``H/2`` columns are forward
            states, the rest backward states.
        tau: block length.
        lengths: valid length per utterance for padded batches.
    """
    if tau < 1:
        raise InvalidConfigError(f"tau must be >= 1, got {tau}")
    squeeze = z.dim() == 2
    if squeeze:
        z = z.unsqueeze(0)
    b, t, h = z.shape
    if h % 2:
        raise InvalidConfigError(f"latent width must be even to split directions, got {h}")
    if lengths is None:
        lengths = torch.full((b,), t, dtype=torch.long, device=z.device)
    steps = torch.arange(t, device=z.device)
    block_start = (steps // tau) * tau
    last = (lengths - 1)[:, None]
    fwd_idx = torch.minimum(block_start + tau - 1, torch.full_like(block_start, t - 1))[None, :]
    fwd_idx = torch.minimum(fwd_idx, last)
    bwd_idx = torch.minimum(block_start[None, :].expand(b, -1), last)
    half = h // 2
    fwd = z[..., :half].gather(1, fwd_idx.unsqueeze(-1).expand(-1, -1, half))
    bwd = z[..., half:].gather(1, bwd_idx.unsqueeze(-1).expand(-1, -1, half))
    out = torch.cat([fwd, bwd], dim=-1)
    out = out * lengths_to_mask(lengths, t).unsqueeze(-1).to(out.dtype)
    return out.squeeze(0) if squeeze else out


class ReferenceEncoder(nn.Module):
    """Maps ``(mel, phoneme encodings, speaker embedding)`` to a bottlenecked
    prosody latent.

    Instance norm follows every conv so per-bin offsets of the input (the
    stationary part of a speaker's spectrum) never reach the GRU. The first
    conv uses replicate padding so a constant offset stays constant at the
    borders. Conditioning enters after normalisation.
    """

    def __init__(self, n_mels: int, phoneme_dim: int, speaker_dim: int,
                 config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        self.convs = ConvStack1d(n_mels, config.conv_channels, config.kernel_size,
                                 instance_norm=True, pad_mode="replicate")
        half = config.latent_dim // 2
        self.gru = BiGRU(self.convs.out_channels + phoneme_dim + speaker_dim, half)
        # block-diagonal heads keep forward and backward halves separate for the bottleneck
        self.mean_fwd = dense(half, half)
        self.mean_bwd = dense(half, half)
        self.logvar_fwd = dense(half, half)
        self.logvar_bwd = dense(half, half)

    def encode_z_in(self, x: torch.Tensor, y: torch.Tensor, e_s: torch.Tensor,
                    lengths: torch.Tensor | None = None) -> torch.Tensor:
        if y.shape[1] == 0 or x.shape[1] == 0:
            raise InvalidInputError("empty sequence")
        if x.shape[1] != y.shape[1]:
            raise AlignmentError(f"mel has {x.shape[1]} frames, phoneme encodings {y.shape[1]}")
        h = self.convs(x, lengths)
        cond = e_s.unsqueeze(1).expand(-1, h.shape[1], -1)
        return self.gru(torch.cat([h, y, cond], dim=-1), lengths)

    def posterior(self, z_in: torch.Tensor, deterministic: bool = False,
                  generator: torch.Generator | None = None):
        half = self.config.latent_dim // 2
        fwd, bwd = z_in[..., :half], z_in[..., half:]
        mean = torch.cat([self.mean_fwd(fwd), self.mean_bwd(bwd)], dim=-1)
        logvar = torch.cat([self.logvar_fwd(fwd), self.logvar_bwd(bwd)], dim=-1)
        if deterministic:
            return mean, logvar, mean
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return mean, logvar, mean + torch.exp(0.5 * logvar) * noise

    def forward(self, x: torch.Tensor, y: torch.Tensor, e_s: torch.Tensor,
                lengths: torch.Tensor | None = None, deterministic: bool = False,
                generator: torch.Generator | None = None) -> ProsodyLatent:
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        mask = lengths_to_mask(lengths, x.shape[1])
        z_in = self.encode_z_in(x, y, e_s, lengths)
        mean, logvar, z = self.posterior(z_in, deterministic, generator)
        z_hat = temporal_bottleneck(z, self.config.tau, lengths)
        return ProsodyLatent(z_in, mean, logvar, z, z_hat, mask)
