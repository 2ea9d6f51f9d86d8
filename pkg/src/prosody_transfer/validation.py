"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import AlignmentError, InvalidInputError
from .features import MelSpectrogram


def check_mel(x, n_mels: int | None = None, name: str = "mel") -> np.ndarray:
    """Return ``x`` as a finite float32 ``T x M`` array."""
    if isinstance(x, MelSpectrogram):
        x = x.frames
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty T x M array, got shape {arr.shape}")
    if n_mels is not None and arr.shape[1] != n_mels:
        raise InvalidInputError(f"{name} has {arr.shape[1]} mel bins, expected {n_mels}")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_mel_list(X: Sequence, n_mels: int | None = None) -> list[np.ndarray]:
    if len(X) == 0:
        raise InvalidInputError("expected at least one mel-spectrogram")
    out = [check_mel(x, n_mels, name=f"X[{i}]") for i, x in enumerate(X)]
    widths = {a.shape[1] for a in out}
    if len(widths) != 1:
        raise InvalidInputError(f"inconsistent mel widths {sorted(widths)}")
    return out


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise InvalidInputError(f"expected {n_samples} labels, got shape {y.shape}")
    return y


def check_same_length(a: int, b: int, what: str) -> None:
    if a != b:
        raise AlignmentError(f"{what}: {a} != {b}")
