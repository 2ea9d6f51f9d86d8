"""Window discriminator with self-attention and the hinge adversarial losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InvalidInputError
from .nn_core import LEAKY_SLOPE, dense, glorot_uniform_, softmax

WINDOW = 32


def hinge_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and generator hinge losses.

    ``L_D = -mean(min(0, -1 + d_real)) - mean(min(0, -1 - d_fake))`` and
    ``L_G = -mean(d_fake)``.
    """
    zero = torch.zeros((), dtype=d_fake.dtype)
    loss_d = -torch.minimum(zero, d_real - 1).mean() - torch.minimum(zero, -1 - d_fake).mean()
    return loss_d, -d_fake.mean()


def _conv(c_in: int, c_out: int, stride: tuple[int, int]) -> nn.Conv2d:
    conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
    glorot_uniform_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class SelfAttention2d(nn.Module):
    """Attention over all spatial positions with a residual gain that starts at zero."""

    def __init__(self, channels: int):
        super().__init__()
        inner = max(1, channels // 8)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        for conv in (self.query, self.key, self.value):
            glorot_uniform_(conv.weight)
            nn.init.zeros_(conv.bias)
        self.gain = nn.Parameter(torch.zeros(()))
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.query(x).flatten(2)            # B x C' x N
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)            # B x C x N
        attn = softmax(q.transpose(1, 2) @ k)   # B x N(query) x N(key)
        self.last_attention = attn.detach()
        out = (v @ attn.transpose(1, 2)).view(b, c, h, w)
        return x + self.gain * out


class Discriminator(nn.Module):
    """Unconditional critic for ``W x M`` mel windows; one scalar per window."""

    def __init__(self, n_mels: int = 80, window: int = WINDOW,
                 channels: Sequence[int] = (32, 64, 128, 128), attention_after: int = 3):
        super().__init__()
        self.n_mels = n_mels
        self.window = window
        convs = []
        c_in = 1
        for i, c_out in enumerate(channels):
            time_stride = 2 if i in (1, 2) else 1
            convs.append(_conv(c_in, c_out, (time_stride, 2)))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.attention_after = attention_after
        self.attention = SelfAttention2d(channels[attention_after - 1])
        self.head = dense(c_in, 1)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        if windows.dim() != 3 or windows.shape[1:] != (self.window, self.n_mels):
            raise InvalidInputError(
                f"expected B x {self.window} x {self.n_mels} windows, got {tuple(windows.shape)}")
        h = windows.unsqueeze(1)
        for i, conv in enumerate(self.convs, 1):
            h = F.leaky_relu(conv(h), LEAKY_SLOPE)
            if i == self.attention_after:
                h = self.attention(h)
        return self.head(h.mean(dim=(2, 3))).squeeze(-1)


@dataclass
class WindowBatch:
    windows: torch.Tensor   # B x W x M
    starts: np.ndarray      # start frame per window
    is_real: bool


def _window_index(length: int, window: int, start: int) -> np.ndarray:
    if length >= window:
        return np.arange(start, start + window)
    mode = "reflect" if length > 1 else "edge"
    return np.pad(np.arange(length), (0, window - length), mode=mode)


def sample_windows(mels: torch.Tensor, lengths: torch.Tensor, window: int = WINDOW,
                   rng: np.random.Generator | None = None, per_utterance: int = 1,
                   is_real: bool = True, starts: np.ndarray | None = None) -> WindowBatch:
    """Cut random ``window``-frame slices from the valid part of each utterance.

    Starts are uniform in ``[0, T - W]``; utterances shorter than the window
    are reflect-padded and used whole. Indexing keeps the graph, so windows cut
    from generated mels carry gradients back to the generator.
    """
    rng = rng if rng is not None else np.random.default_rng()
    lens = [int(n) for n in lengths]
    if starts is None:
        starts = np.array([int(rng.integers(0, max(n - window, 0) + 1))
                           for n in lens for _ in range(per_utterance)], dtype=np.int64)
    rows, idx = [], []
    for k, s in enumerate(starts):
        b = k // per_utterance
        rows.append(b)
        idx.append(_window_index(lens[b], window, int(s)))
    rows_t = torch.as_tensor(rows)
    idx_t = torch.as_tensor(np.stack(idx))
    windows = mels[rows_t[:, None], idx_t]
    return WindowBatch(windows, np.asarray(starts), is_real)
