"""Differentiable primitives and masked layers shared by every network.

Values and gradients come from torch autograd. The functional ops mirror the
textbook definitions one-to-one so they can be checked against scalar-loop
oracles; the ``nn.Module`` layers below compose them for padded batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .exceptions import InvalidConfigError, InvalidInputError

EPS = 1e-5
LEAKY_SLOPE = 0.2


def check_finite(t: torch.Tensor, what: str = "input") -> None:
    if not torch.isfinite(t).all():
        raise InvalidInputError(f"{what} contains non-finite values")


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """Boolean ``(B, max_len)`` mask, True on valid frames."""
    steps = torch.arange(max_len, device=lengths.device)
    return steps[None, :] < lengths[:, None]


@dataclass
class GaussianStats:
    """Per-channel mean and (guarded) standard deviation."""

    mean: torch.Tensor
    std: torch.Tensor


def channel_stats(k: torch.Tensor, mask: torch.Tensor | None = None,
                  eps: float = EPS) -> GaussianStats:
    """Mean and std of each channel of ``k`` (``B x C x *spatial``).

    ``mask`` broadcasts against ``B x 1 x *spatial``; masked-out elements do not
    enter either statistic. The std is floored at ``eps``.
    """
    spatial = tuple(range(2, k.dim()))
    if mask is None:
        m = torch.ones_like(k[:, :1])
    else:
        m = mask.to(k.dtype)
        while m.dim() < k.dim():
            m = m.unsqueeze(1)
    count = m.sum(dim=spatial, keepdim=True).clamp_min(1.0)
    mu = (k * m).sum(dim=spatial, keepdim=True) / count
    var = (((k - mu) * m) ** 2).sum(dim=spatial, keepdim=True) / count
    # sqrt(max(var, eps^2)) == max(sigma, eps) but keeps the gradient finite at var == 0
    sigma = torch.sqrt(var.clamp_min(eps * eps))
    return GaussianStats(mean=mu, std=sigma)


def instance_norm(k: torch.Tensor, mask: torch.Tensor | None = None,
                  eps: float = EPS) -> torch.Tensor:
    """Batched instance normalisation over all non-channel axes.

    Args:
        k: ``B x C x *spatial`` activations.
        mask: optional ``B x *spatial`` validity mask; padded positions are
            excluded from the statistics and zeroed in the output.
        eps: lower bound on the per-channel std.
    """
    stats = channel_stats(k, mask, eps)
    out = (k - stats.mean) / stats.std
    if mask is not None:
        m = mask.to(k.dtype)
        while m.dim() < k.dim():
            m = m.unsqueeze(1)
        out = out * m
    return out


def instance_norm_2d(k: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Normalise each channel of a single ``C x U x V`` instance."""
    if k.dim() != 3:
        raise InvalidInputError(f"expected C x U x V, got shape {tuple(k.shape)}")
    if k.shape[1] * k.shape[2] < 1:
        raise InvalidInputError("empty channel")
    check_finite(k)
    return instance_norm(k.unsqueeze(0), eps=eps).squeeze(0)


def _same_pad(width: int) -> int:
    if width % 2 == 0:
        raise InvalidConfigError(f"'same' padding needs an odd kernel width, got {width}")
    return width // 2


def conv1d_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                   stride: int = 1, padding: str = "same",
                   pad_mode: str = "zeros") -> torch.Tensor:
    """Cross-correlation over time of a time-major signal.

    Args:
        x: ``T x Cin`` or ``B x T x Cin``.
        weight: ``Cout x Cin x w``.
        bias: ``Cout`` or None.
        stride: temporal stride.
        padding: ``"same"`` (pad ``w // 2`` each side) or ``"valid"``.
        pad_mode: ``"zeros"`` or ``"replicate"`` for the ``"same"`` border.

    Returns:
        ``T' x Cout`` (or batched) with ``T' = floor((T + 2p - w) / stride) + 1``.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-1] != weight.shape[1]:
        raise InvalidInputError(f"input has {x.shape[-1]} channels, kernel expects {weight.shape[1]}")
    width = weight.shape[-1]
    p = _same_pad(width) if padding == "same" else 0
    if padding not in ("same", "valid"):
        raise InvalidConfigError(f"unknown padding {padding!r}")
    if width > x.shape[1] + 2 * p:
        raise InvalidConfigError(f"kernel width {width} exceeds padded length {x.shape[1] + 2 * p}")
    h = x.transpose(1, 2)
    if p:
        mode = {"zeros": "constant", "replicate": "replicate"}.get(pad_mode)
        if mode is None:
            raise InvalidConfigError(f"unknown pad_mode {pad_mode!r}")
        h = F.pad(h, (p, p), mode=mode)
    out = F.conv1d(h, weight, bias, stride=stride).transpose(1, 2)
    return out.squeeze(0) if squeeze else out


def conv2d_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                   strides: tuple[int, int] = (1, 1), padding: str = "same") -> torch.Tensor:
    """2D cross-correlation of ``Cin x U x V`` (or batched) input."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[1] != weight.shape[1]:
        raise InvalidInputError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    kh, kw = weight.shape[-2:]
    if padding == "same":
        ph, pw = _same_pad(kh), _same_pad(kw)
    elif padding == "valid":
        ph = pw = 0
    else:
        raise InvalidConfigError(f"unknown padding {padding!r}")
    if kh > x.shape[2] + 2 * ph or kw > x.shape[3] + 2 * pw:
        raise InvalidConfigError("kernel larger than padded input")
    out = F.conv2d(x, weight, bias, stride=strides, padding=(ph, pw))
    return out.squeeze(0) if squeeze else out


def gru_forward(x: torch.Tensor, w_ih: torch.Tensor, w_hh: torch.Tensor,
                b_ih: torch.Tensor, b_hh: torch.Tensor,
                direction: str = "forward") -> torch.Tensor:
    """Explicit GRU recurrence from a zero initial state.

    Gate layout follows torch (reset, update, candidate stacked along rows of
    ``w_ih``/``w_hh``); the reset gate scales the recurrent candidate term
    after its matrix product. ``direction="backward"`` runs over the reversed
    sequence and re-reverses, so row ``t`` is always time-aligned.

    Args:
        x: ``T x D`` or ``B x T x D``.
    """
    if direction not in ("forward", "backward"):
        raise InvalidConfigError(f"unknown direction {direction!r}")
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    hidden = w_hh.shape[1]
    steps = range(x.shape[1])
    if direction == "backward":
        steps = reversed(steps)
    h = x.new_zeros(x.shape[0], hidden)
    outputs: list[torch.Tensor] = [None] * x.shape[1]  # type: ignore[list-item]
    for t in steps:
        gi = x[:, t] @ w_ih.T + b_ih
        gh = h @ w_hh.T + b_hh
        i_r, i_z, i_n = gi.chunk(3, dim=1)
        h_r, h_z, h_n = gh.chunk(3, dim=1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        h = (1 - z) * n + z * h
        outputs[t] = h
    out = torch.stack(outputs, dim=1)
    return out.squeeze(0) if squeeze else out


def dense_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Row-wise affine map ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise InvalidInputError(f"input width {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def kl_diag_std_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over the last axis."""
    return 0.5 * (mean ** 2 + torch.exp(logvar) - 1.0 - logvar).sum(dim=-1)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every named parameter.

    Parameters the loss does not reach get an all-zero gradient.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, tensors)}
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g
            for n, p, g in zip(names, tensors, grads)}


def glorot_uniform_(weight: torch.Tensor) -> torch.Tensor:
    receptive = weight[0][0].numel() if weight.dim() > 2 else 1
    fan_in = weight.shape[1] * receptive
    fan_out = weight.shape[0] * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        return weight.uniform_(-bound, bound)


def dense(in_features: int, out_features: int) -> nn.Linear:
    layer = nn.Linear(in_features, out_features)
    glorot_uniform_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


def _fill_tail(x: torch.Tensor, lengths: torch.Tensor | None, mode: str) -> torch.Tensor:
    """Overwrite frames past each length so a 'same' conv sees the unpadded border.

    ``x`` is ``B x C x T``. Zero mode zeroes the tail; replicate mode copies the
    last valid frame forward.
    """
    if lengths is None:
        return x
    t = x.shape[-1]
    if mode == "zeros":
        return x * lengths_to_mask(lengths, t).unsqueeze(1).to(x.dtype)
    idx = torch.minimum(torch.arange(t, device=x.device)[None, :], (lengths - 1)[:, None])
    return x.gather(2, idx.unsqueeze(1).expand(-1, x.shape[1], -1))


class ConvStack1d(nn.Module):
    """Time-major conv1d layers, each followed by optional masked instance norm
    and a leaky rectifier. Padding past each utterance length is invisible."""

    def __init__(self, in_channels: int, channels: Sequence[int], kernel_size: int = 5,
                 instance_norm: bool = False, pad_mode: str = "zeros"):
        super().__init__()
        if pad_mode not in ("zeros", "replicate"):
            raise InvalidConfigError(f"unknown pad_mode {pad_mode!r}")
        self.pad = _same_pad(kernel_size)
        self.pad_mode = pad_mode
        self.use_norm = instance_norm
        convs = []
        c_in = in_channels
        for c_out in channels:
            conv = nn.Conv1d(c_in, c_out, kernel_size)
            glorot_uniform_(conv.weight)
            nn.init.zeros_(conv.bias)
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.out_channels = c_in

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None,
                return_normed: bool = False):
        h = x.transpose(1, 2)
        mask = None if lengths is None else lengths_to_mask(lengths, h.shape[-1])
        normed = []
        mode = "constant" if self.pad_mode == "zeros" else "replicate"
        for conv in self.convs:
            h = _fill_tail(h, lengths, self.pad_mode)
            h = conv(F.pad(h, (self.pad, self.pad), mode=mode))
            if self.use_norm:
                h = instance_norm(h, mask)
                normed.append(h.transpose(1, 2))
            h = F.leaky_relu(h, LEAKY_SLOPE)
        if mask is not None:
            h = h * mask.unsqueeze(1).to(h.dtype)
        out = h.transpose(1, 2)
        return (out, normed) if return_normed else out


def _init_gru(gru: nn.GRU) -> None:
    bound = 1.0 / math.sqrt(gru.hidden_size)
    for p in gru.parameters():
        nn.init.uniform_(p, -bound, bound)


class BiGRU(nn.Module):
    """Bi-directional GRU; outputs ``[forward | backward]`` states per frame."""

    def __init__(self, input_size: int, hidden_per_direction: int):
        super().__init__()
        self.gru = nn.GRU(input_size, hidden_per_direction, batch_first=True, bidirectional=True)
        _init_gru(self.gru)
        self.hidden_per_direction = hidden_per_direction

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if lengths is None:
            return self.gru(x)[0]
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        return pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])[0]


class LastStateGRU(nn.Module):
    """Uni-directional GRU returning the state after each sequence's last valid frame."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.gru = nn.GRU(input_size, hidden_size, batch_first=True)
        _init_gru(self.gru)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if lengths is None:
            return self.gru(x)[1][-1]
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        return self.gru(packed)[1][-1]
