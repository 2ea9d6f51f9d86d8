"""Synthetic multi-speaker corpus, on-disk layout, loading and batching.

Layout::

    root/manifest.json
    root/<speaker>/<utt_id>.mel    CCMF log-mel
    root/<speaker>/<utt_id>.phn    space-separated phoneme ids
    root/<speaker>/<utt_id>.dur    "phoneme_id frame_count" per line
    root/<speaker>/<utt_id>.truth  optional CCMF, M=1 prosody contour
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .exceptions import AlignmentError, CorpusError, InvalidConfigError
from .features import (
    MelConfig,
    MelSpectrogram,
    PhonemeSequence,
    compute_mel,
    read_durations,
    read_mel,
    read_mel_header,
    read_phonemes,
    upsample_phonemes,
    write_durations,
    write_mel,
    write_phonemes,
)

MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")
PAUSE_ID = 0


@dataclass
class Utterance:
    utt_id: str
    speaker_id: int
    mel: MelSpectrogram
    phonemes: PhonemeSequence
    prosody_truth: np.ndarray | None = None

    def __post_init__(self):
        if self.phonemes.total_frames != self.mel.T:
            raise AlignmentError(
                f"{self.utt_id}: durations sum to {self.phonemes.total_frames}, mel has {self.mel.T} frames")

    @property
    def T(self) -> int:
        return self.mel.T


@dataclass
class SyntheticSpec:
    num_speakers: int = 3
    num_phonemes: int = 12
    utterances_per_speaker: int = 20
    seed: int = 0
    n_mels: int = 80
    val_per_speaker: int = 3
    test_per_speaker: int = 3
    unseen_speakers: int = 0
    min_phonemes: int = 5
    max_phonemes: int = 20
    min_duration: int = 3
    max_duration: int = 10
    noise: float = 0.05


def _smooth(rng: np.random.Generator, n: int, width: int = 5) -> np.ndarray:
    raw = rng.standard_normal(n + width - 1)
    kernel = np.hanning(width + 2)[1:-1]
    out = np.convolve(raw, kernel / kernel.sum(), mode="valid")
    return out / out.std()


def _speaker_signature(rng: np.random.Generator, n_mels: int) -> np.ndarray:
    ramp = np.linspace(-0.5, 0.5, n_mels)
    offset = rng.uniform(-1.0, 1.0)
    tilt = rng.uniform(-2.0, 2.0)
    return offset + tilt * ramp + 0.5 * _smooth(rng, n_mels, 9)


def _prosody_contour(rng: np.random.Generator, n_frames: int) -> np.ndarray:
    t = np.arange(n_frames)
    contour = np.zeros(n_frames)
    for _ in range(int(rng.integers(1, 4))):
        period = rng.uniform(16.0, 80.0)
        contour += rng.uniform(0.2, 0.6) * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    return contour


def synthesize_utterance(templates: np.ndarray, signature: np.ndarray, ids: Sequence[int],
                         durations: Sequence[int], contour: np.ndarray,
                         noise: np.ndarray | None = None) -> np.ndarray:
    """Compose a log-mel: phoneme templates + speaker signature + contour + noise."""
    up = upsample_phonemes(PhonemeSequence(list(ids), list(durations)))
    mel = templates[up] + signature[None, :] + contour[:, None]
    if noise is not None:
        mel = mel + noise
    return mel.astype(np.float32)


def generate_synthetic_corpus(out, spec: SyntheticSpec = SyntheticSpec()) -> Path:
    """Write a deterministic synthetic corpus to ``out`` and return its path."""
    if spec.num_speakers < 2:
        raise InvalidConfigError("need at least 2 speakers")
    if spec.num_phonemes < 3:
        raise InvalidConfigError("need at least 3 phonemes")
    held_out = spec.val_per_speaker + spec.test_per_speaker
    if spec.utterances_per_speaker <= held_out:
        raise InvalidConfigError("utterances_per_speaker must exceed val + test counts")

    rng = np.random.default_rng(spec.seed)
    m = spec.n_mels
    templates = np.stack([-4.0 + 1.5 * _smooth(rng, m, 7) for _ in range(spec.num_phonemes)])
    templates[PAUSE_ID] = -8.0 + 0.3 * _smooth(rng, m, 7)
    total_speakers = spec.num_speakers + spec.unseen_speakers
    signatures = np.stack([_speaker_signature(rng, m) for _ in range(total_speakers)])

    config = MelConfig(n_mels=m)
    speakers = {s: f"spk{s:02d}" for s in range(total_speakers)}
    utterances: list[Utterance] = []
    splits: dict[str, list[str]] = {k: [] for k in SPLITS}
    for s in range(total_speakers):
        for u in range(spec.utterances_per_speaker):
            n = int(rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
            ids = [PAUSE_ID] + rng.integers(1, spec.num_phonemes, n - 2).tolist() + [PAUSE_ID]
            durations = rng.integers(spec.min_duration, spec.max_duration + 1, n).tolist()
            n_frames = int(sum(durations))
            contour = _prosody_contour(rng, n_frames)
            noise = spec.noise * rng.standard_normal((n_frames, m))
            frames = synthesize_utterance(templates, signatures[s], ids, durations, contour, noise)
            utt_id = f"{speakers[s]}_u{u:03d}"
            utterances.append(Utterance(
                utt_id, s, MelSpectrogram(frames, config.sample_rate, config.hop),
                PhonemeSequence(ids, durations), contour.astype(np.float32)))
            if s >= spec.num_speakers:
                split = "test"
            elif u < spec.utterances_per_speaker - held_out:
                split = "train"
            elif u < spec.utterances_per_speaker - spec.test_per_speaker:
                split = "val"
            else:
                split = "test"
            splits[split].append(utt_id)

    extra = {
        "generator": asdict(spec),
        "ground_truth": {
            "phoneme_templates": templates.tolist(),
            "speaker_signatures": signatures.tolist(),
        },
    }
    return write_corpus(out, utterances, speakers, splits, config, spec.num_phonemes, extra)


def normalization_stats(utterances: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    frames = np.concatenate([u.mel.frames for u in utterances]).astype(np.float64)
    return frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-5)


def write_corpus(out, utterances: Sequence[Utterance], speakers: dict[int, str],
                 splits: dict[str, list[str]], config: MelConfig, num_phonemes: int,
                 extra: dict | None = None) -> Path:
    """Persist utterances and a manifest; normalization comes from the train split."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    by_id = {u.utt_id: u for u in utterances}
    for u in utterances:
        folder = root / speakers[u.speaker_id]
        folder.mkdir(exist_ok=True)
        write_mel(folder / f"{u.utt_id}.mel", u.mel)
        write_phonemes(folder / f"{u.utt_id}.phn", u.phonemes.ids)
        write_durations(folder / f"{u.utt_id}.dur", u.phonemes)
        if u.prosody_truth is not None:
            truth = MelSpectrogram(np.asarray(u.prosody_truth).reshape(-1, 1), u.mel.sample_rate, u.mel.hop)
            write_mel(folder / f"{u.utt_id}.truth", truth)
    train = [by_id[i] for i in splits.get("train", [])]
    if not train:
        raise CorpusError("train split is empty")
    mean, std = normalization_stats(train)
    manifest = {
        "version": 1,
        "mel_config": asdict(config),
        "num_phonemes": int(num_phonemes),
        "speakers": {str(k): v for k, v in sorted(speakers.items())},
        "splits": {k: [{"utt_id": i, "speaker_id": by_id[i].speaker_id} for i in splits.get(k, [])]
                   for k in SPLITS},
        "normalization": {"mean": mean.tolist(), "std": std.tolist()},
    }
    if extra:
        manifest.update(extra)
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return root


def ingest_audio_corpus(out, items: Sequence[dict], speakers: dict[int, str],
                        splits: dict[str, list[str]], config: MelConfig = MelConfig(),
                        num_phonemes: int | None = None) -> Path:
    """Build a corpus from real recordings.

    Each item carries ``utt_id``, ``speaker_id``, ``wav`` (path) and
    ``durations`` (path to a duration file from an external aligner).
    """
    from scipy.io import wavfile

    utterances = []
    for item in items:
        sr, samples = wavfile.read(item["wav"])
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim > 1:
            samples = samples.mean(axis=1)
        if np.issubdtype(np.asarray(samples).dtype, np.integer) or np.abs(samples).max() > 1.0:
            samples = samples / 32768.0
        mel = compute_mel(samples, config, sample_rate=sr)
        utterances.append(Utterance(item["utt_id"], int(item["speaker_id"]), mel,
                                    read_durations(item["durations"])))
    if num_phonemes is None:
        num_phonemes = 1 + max(max(u.phonemes.ids) for u in utterances)
    return write_corpus(out, utterances, speakers, splits, config, num_phonemes)


@dataclass
class Corpus:
    """A validated corpus directory with lazy, cached utterance access."""

    root: Path
    manifest: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def mel_config(self) -> MelConfig:
        return MelConfig(**self.manifest["mel_config"])

    @property
    def num_phonemes(self) -> int:
        return int(self.manifest["num_phonemes"])

    @property
    def speakers(self) -> dict[int, str]:
        return {int(k): v for k, v in self.manifest["speakers"].items()}

    @property
    def norm_mean(self) -> np.ndarray:
        return np.asarray(self.manifest["normalization"]["mean"], dtype=np.float32)

    @property
    def norm_std(self) -> np.ndarray:
        return np.asarray(self.manifest["normalization"]["std"], dtype=np.float32)

    def split_ids(self, split: str) -> list[str]:
        return [e["utt_id"] for e in self.manifest["splits"].get(split, [])]

    def train_speakers(self) -> list[int]:
        return sorted({e["speaker_id"] for e in self.manifest["splits"]["train"]})

    def _entry(self, utt_id: str) -> dict:
        for entries in self.manifest["splits"].values():
            for e in entries:
                if e["utt_id"] == utt_id:
                    return e
        raise CorpusError(f"unknown utterance {utt_id!r}")

    def _path(self, entry: dict, suffix: str) -> Path:
        return self.root / self.speakers[entry["speaker_id"]] / f"{entry['utt_id']}{suffix}"

    def utterance(self, utt_id: str) -> Utterance:
        if utt_id not in self._cache:
            entry = self._entry(utt_id)
            mel = read_mel(self._path(entry, ".mel"))
            durations = read_durations(self._path(entry, ".dur"))
            truth_path = self._path(entry, ".truth")
            truth = read_mel(truth_path).frames[:, 0] if truth_path.exists() else None
            self._cache[utt_id] = Utterance(utt_id, entry["speaker_id"], mel, durations, truth)
        return self._cache[utt_id]

    def utterances(self, split: str) -> list[Utterance]:
        return [self.utterance(i) for i in self.split_ids(split)]

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.norm_mean) / self.norm_std).astype(np.float32)

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        return (frames * self.norm_std + self.norm_mean).astype(np.float32)


def load_corpus(root) -> Corpus:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise CorpusError(f"{path} not found")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: invalid JSON ({exc})") from None
    for key in ("speakers", "splits", "normalization", "mel_config", "num_phonemes"):
        if key not in manifest:
            raise CorpusError(f"{path}: missing key {key!r}")
    corpus = Corpus(root, manifest)
    entries = [e for k in SPLITS for e in manifest["splits"].get(k, [])]
    if not entries or not manifest["splits"].get("train"):
        raise CorpusError(f"{path}: manifest lists no training utterances")
    ids = [e["utt_id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise CorpusError(f"{path}: splits are not disjoint")
    speakers = corpus.speakers
    n_mels = manifest["mel_config"]["n_mels"]
    for e in entries:
        if e["speaker_id"] not in speakers:
            raise CorpusError(f"{e['utt_id']}: unknown speaker {e['speaker_id']}")
        for suffix in (".mel", ".dur", ".phn"):
            if not corpus._path(e, suffix).exists():
                raise CorpusError(f"missing file {corpus._path(e, suffix)}")
        t, m, _, _ = read_mel_header(corpus._path(e, ".mel"))
        if m != n_mels:
            raise CorpusError(f"{e['utt_id']}: {m} mel bins, manifest says {n_mels}")
        durations = read_durations(corpus._path(e, ".dur"))
        if durations.total_frames != t:
            raise AlignmentError(f"{e['utt_id']}: durations sum to {durations.total_frames}, mel has {t} frames")
        if read_phonemes(corpus._path(e, ".phn")) != durations.ids:
            raise CorpusError(f"{e['utt_id']}: .phn and .dur phoneme ids disagree")
    return corpus


@dataclass(frozen=True)
class Batch:
    mel: torch.Tensor          # B x T x M, normalized, zero past each length
    phonemes: torch.Tensor     # B x T upsampled ids, 0 past each length
    lengths: torch.Tensor      # B
    mask: torch.Tensor         # B x T bool
    speaker_ids: torch.Tensor  # B
    utt_ids: tuple[str, ...]


def collate(utterances: Sequence[Utterance], normalizer=None) -> Batch:
    """Zero-pad utterances into one batch.

    ``normalizer`` is anything with a ``normalize(frames)`` method (a
    :class:`Corpus` works); without it frames are used as stored.
    """
    t_max = max(u.T for u in utterances)
    m = utterances[0].mel.M
    mel = np.zeros((len(utterances), t_max, m), dtype=np.float32)
    ph = np.zeros((len(utterances), t_max), dtype=np.int64)
    for i, u in enumerate(utterances):
        frames = u.mel.frames if normalizer is None else normalizer.normalize(u.mel.frames)
        mel[i, : u.T] = frames
        ph[i, : u.T] = upsample_phonemes(u.phonemes, u.T)
    lengths = torch.tensor([u.T for u in utterances], dtype=torch.long)
    return Batch(
        mel=torch.from_numpy(mel),
        phonemes=torch.from_numpy(ph),
        lengths=lengths,
        mask=torch.arange(t_max)[None, :] < lengths[:, None],
        speaker_ids=torch.tensor([u.speaker_id for u in utterances], dtype=torch.long),
        utt_ids=tuple(u.utt_id for u in utterances),
    )


def batch_order(lengths: Sequence[int], batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Length-bucketed batches of indices, shuffled deterministically per (seed, epoch)."""
    if batch_size < 1:
        raise InvalidConfigError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(len(lengths))
    ordered = sorted(perm.tolist(), key=lambda i: lengths[i])
    groups = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    return [groups[i] for i in rng.permutation(len(groups))]


def make_batches(utterances: Sequence[Utterance], batch_size: int, seed: int = 0,
                 epoch: int = 0, normalizer=None) -> Iterator[Batch]:
    for group in batch_order([u.T for u in utterances], batch_size, seed, epoch):
        yield collate([utterances[i] for i in group], normalizer)
