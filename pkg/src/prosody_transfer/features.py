"""Log-mel extraction, mel/duration file formats and phoneme upsampling."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import AlignmentError, FormatError, InvalidInputError

MEL_MAGIC = b"CCMF"
MEL_VERSION = 1
_MEL_HEADER = struct.Struct("<4sHIIII")


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 200
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5

    @property
    def min_log(self) -> float:
        return math.log(self.log_floor)


@dataclass
class MelSpectrogram:
    """``T x M`` natural-log mel magnitudes."""

    frames: np.ndarray
    sample_rate: int = 16000
    hop: int = 200

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InvalidInputError(f"mel must be T x M with T >= 1, got {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def M(self) -> int:
        return self.frames.shape[1]


@dataclass
class PhonemeSequence:
    ids: list[int]
    durations: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.ids = [int(i) for i in self.ids]
        self.durations = [int(d) for d in self.durations]
        if len(self.ids) != len(self.durations):
            raise AlignmentError(f"{len(self.ids)} phonemes but {len(self.durations)} durations")

    @property
    def total_frames(self) -> int:
        return sum(self.durations)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: MelConfig = MelConfig()) -> np.ndarray:
    """Centre frequency (Hz) of every triangular filter."""
    fmax = config.fmax or config.sample_rate / 2
    pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(fmax), config.n_mels + 2)
    return mel_to_hz(pts)[1:-1]


def mel_filterbank(config: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular HTK-spaced filters, ``n_mels x (n_fft // 2 + 1)``, peak height 1."""
    fmax = config.fmax or config.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(fmax), config.n_mels + 2))
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def _window(n_fft: int) -> np.ndarray:
    return np.hanning(n_fft + 1)[:-1]


def stft_magnitude(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    """Centred STFT, ``ceil(N / hop)`` frames, returns complex ``T x (n_fft//2+1)``."""
    n = len(samples)
    half = config.n_fft // 2
    padded = np.pad(samples, (half, half), mode="reflect")
    n_frames = math.ceil(n / config.hop)
    idx = np.arange(config.n_fft)[None, :] + config.hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(padded[idx] * _window(config.n_fft), axis=1)


def compute_mel(samples: np.ndarray, config: MelConfig = MelConfig(),
                sample_rate: int | None = None) -> MelSpectrogram:
    samples = np.asarray(samples, dtype=np.float64)
    if sample_rate is not None and sample_rate != config.sample_rate:
        raise InvalidInputError(f"sample rate {sample_rate} != configured {config.sample_rate}")
    if samples.ndim != 1 or len(samples) < config.n_fft:
        raise InvalidInputError(f"signal of {len(samples)} samples is shorter than one window")
    if not np.isfinite(samples).all():
        raise InvalidInputError("signal contains non-finite samples")
    mag = np.abs(stft_magnitude(samples, config))
    mel = mag @ mel_filterbank(config).T
    frames = np.log(np.maximum(mel, config.log_floor))
    return MelSpectrogram(frames, config.sample_rate, config.hop)


def _istft(spec: np.ndarray, config: MelConfig, length: int) -> np.ndarray:
    half = config.n_fft // 2
    win = _window(config.n_fft)
    frames = np.fft.irfft(spec, n=config.n_fft, axis=1) * win
    total = length + 2 * half + config.n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    for t, frame in enumerate(frames):
        start = t * config.hop
        out[start:start + config.n_fft] += frame
        norm[start:start + config.n_fft] += win ** 2
    out = out / np.maximum(norm, 1e-8)
    return out[half:half + length]


def mel_to_audio(mel: MelSpectrogram, iterations: int = 32,
                 config: MelConfig = MelConfig()) -> np.ndarray:
    """Griffin-Lim reconstruction from a log-mel (listening aid only).

    Returns ``T * hop`` samples. With ``iterations=0`` the pseudo-inverted
    magnitude is synthesised with zero phase.
    """
    fb = mel_filterbank(config)
    linear = np.maximum(np.exp(mel.frames.astype(np.float64)) - config.log_floor, 0.0)
    mag = np.maximum(linear @ np.linalg.pinv(fb).T, 0.0)
    length = mel.T * config.hop
    spec = mag.astype(np.complex128)
    audio = _istft(spec, config, length)
    for _ in range(iterations):
        if len(audio) < config.n_fft:
            break
        rebuilt = stft_magnitude(audio, config)[: mel.T]
        phase = np.exp(1j * np.angle(rebuilt))
        spec = mag[: rebuilt.shape[0]] * phase
        audio = _istft(spec, config, length)
    return audio


def upsample_phonemes(phonemes: PhonemeSequence, expected_frames: int | None = None) -> np.ndarray:
    """Repeat each phoneme id by its duration, giving one id per frame."""
    if not phonemes.ids:
        raise InvalidInputError("empty phoneme sequence")
    if any(d < 1 for d in phonemes.durations):
        raise InvalidInputError("every duration must be at least one frame")
    if expected_frames is not None and phonemes.total_frames != expected_frames:
        raise AlignmentError(f"durations sum to {phonemes.total_frames}, expected {expected_frames} frames")
    return np.repeat(np.asarray(phonemes.ids, dtype=np.int64), phonemes.durations)


def run_length_encode(ids) -> PhonemeSequence:
    ids = np.asarray(ids)
    if ids.size == 0:
        return PhonemeSequence([], [])
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    durations = np.diff(np.r_[starts, ids.size])
    return PhonemeSequence(ids[starts].tolist(), durations.tolist())


def write_mel(path, mel: MelSpectrogram) -> None:
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    header = _MEL_HEADER.pack(MEL_MAGIC, MEL_VERSION, mel.T, mel.M, mel.sample_rate, mel.hop)
    Path(path).write_bytes(header + frames.tobytes())


def read_mel_header(path) -> tuple[int, int, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read(_MEL_HEADER.size)
    return _parse_mel_header(raw, path)


def _parse_mel_header(raw: bytes, path) -> tuple[int, int, int, int]:
    if len(raw) < _MEL_HEADER.size:
        raise FormatError(f"{path}: truncated mel header")
    magic, version, t, m, sr, hop = _MEL_HEADER.unpack_from(raw)
    if magic != MEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MEL_VERSION:
        raise FormatError(f"{path}: unsupported mel version {version}")
    return t, m, sr, hop


def read_mel(path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    t, m, sr, hop = _parse_mel_header(raw, path)
    body = raw[_MEL_HEADER.size:]
    if len(body) != 4 * t * m:
        raise FormatError(f"{path}: expected {t * m} floats, found {len(body) // 4}")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, m).astype(np.float32)
    return MelSpectrogram(frames, sr, hop)


def write_durations(path, phonemes: PhonemeSequence) -> None:
    lines = [f"{i} {d}" for i, d in zip(phonemes.ids, phonemes.durations)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_durations(path) -> PhonemeSequence:
    ids, durations = [], []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 'phoneme_id frame_count'")
        try:
            ids.append(int(parts[0]))
            durations.append(int(parts[1]))
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from None
    return PhonemeSequence(ids, durations)


def write_phonemes(path, ids) -> None:
    Path(path).write_text(" ".join(str(int(i)) for i in ids) + "\n", encoding="utf-8")


def read_phonemes(path) -> list[int]:
    try:
        return [int(tok) for tok in Path(path).read_text(encoding="utf-8").split()]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
