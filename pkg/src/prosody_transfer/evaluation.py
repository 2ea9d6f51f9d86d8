"""Objective stand-ins for listening tests: cycle consistency, speaker-leakage
probing, energy-contour correlation and transfer speaker accuracy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .corpus import Utterance
from .exceptions import InvalidConfigError, InvalidInputError
from .model import TransferPipeline


@dataclass
class CycleEntry:
    utt_id: str
    source_speaker: int
    target_speaker: int
    mean_abs_diff: float
    mean_abs_latent: float


@dataclass
class CycleReport:
    mean_abs_diff: float
    relative: float
    per_utterance: list[CycleEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_abs_diff": self.mean_abs_diff, "relative": self.relative,
                "per_utterance": [asdict(e) for e in self.per_utterance]}


@dataclass
class LeakageReport:
    latent_accuracy: float
    mel_accuracy: float
    shuffled_accuracy: float
    chance: float

    def to_dict(self) -> dict:
        return asdict(self)


def cycle_consistency(pipeline: TransferPipeline, utt: Utterance, target_speaker,
                      mode: str = "deterministic") -> CycleEntry:
    """Encode A, decode as B, re-encode the result with its own embedding and
    compare the two bottlenecked latents."""
    if mode != "deterministic":
        raise InvalidConfigError("cycle consistency is only defined for the deterministic encoder")
    target = pipeline.resolve_speaker(target_speaker)
    z_ab = pipeline.encode(utt)
    x_b = pipeline.decode(utt, z_ab, pipeline.centroids[target])
    z_ba = pipeline.encode(utt, frames=x_b, embedding=pipeline.embed([x_b])[0])
    return CycleEntry(utt.utt_id, utt.speaker_id, target,
                      float(np.abs(z_ab - z_ba).mean()), float(np.abs(z_ab).mean()))


def cycle_report(entries: Sequence[CycleEntry]) -> CycleReport:
    if not entries:
        raise InvalidInputError("no cycle-consistency entries")
    diff = float(np.mean([e.mean_abs_diff for e in entries]))
    scale = float(np.mean([e.mean_abs_latent for e in entries]))
    return CycleReport(diff, diff / scale if scale > 0 else 0.0, list(entries))


def transfer_pairs(pipeline: TransferPipeline, utterances: Sequence[Utterance]):
    """Every (utterance, target) pair with a target other than the source speaker."""
    for u in utterances:
        for target in sorted(pipeline.centroids):
            if target != u.speaker_id:
                yield u, target


def cycle_suite(pipeline: TransferPipeline, utterances: Sequence[Utterance]) -> CycleReport:
    return cycle_report([cycle_consistency(pipeline, u, t) for u, t in transfer_pairs(pipeline, utterances)])


def _probe_accuracy(features: np.ndarray, labels: np.ndarray, seed: int) -> float:
    x_tr, x_te, y_tr, y_te = train_test_split(features, labels, test_size=0.5,
                                              random_state=seed, stratify=labels)
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    probe.fit(x_tr, y_tr)
    return float(probe.score(x_te, y_te))


def leakage_probe(pipeline: TransferPipeline, utterances: Sequence[Utterance], seed: int = 0,
                  shuffles: int = 10) -> LeakageReport:
    """Linear probes for the source speaker on mean-pooled latents and raw mels.

    The shuffled-label control averages ``shuffles`` label permutations.
    """
    labels = np.array([u.speaker_id for u in utterances])
    classes = np.unique(labels)
    if len(classes) < 2:
        raise InvalidInputError("leakage probing needs at least 2 speakers")
    z_feats = np.stack([pipeline.encode(u).mean(axis=0) for u in utterances])
    mel_feats = np.stack([u.mel.frames.mean(axis=0) for u in utterances])
    rng = np.random.default_rng(seed)
    shuffled = [_probe_accuracy(z_feats, rng.permutation(labels), seed + i) for i in range(shuffles)]
    return LeakageReport(
        latent_accuracy=_probe_accuracy(z_feats, labels, seed),
        mel_accuracy=_probe_accuracy(mel_feats, labels, seed),
        shuffled_accuracy=float(np.mean(shuffled)),
        chance=1.0 / len(classes),
    )


def energy_contour(frames: np.ndarray) -> np.ndarray:
    """Per-frame log energy of a natural-log mel: ``log(sum_m exp(x_m))``."""
    return logsumexp(np.asarray(frames, dtype=np.float64), axis=1)


def prosody_correlation(source: np.ndarray, output: np.ndarray, log_floor: float = 1e-5,
                        margin: float = math.log(10.0)) -> float:
    """Pearson r between energy contours over frames where both clear the silence floor."""
    source = np.asarray(source)
    output = np.asarray(output)
    if source.shape[0] != output.shape[0]:
        raise InvalidInputError(f"frame counts differ: {source.shape[0]} vs {output.shape[0]}")
    a, b = energy_contour(source), energy_contour(output)
    floor = math.log(log_floor) + math.log(source.shape[1]) + margin
    keep = (a > floor) & (b > floor)
    if keep.sum() < 2:
        return float("nan")
    a, b = a[keep], b[keep]
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum() * (b * b).sum()))
    return float((a * b).sum() / denom) if denom > 0 else float("nan")


@dataclass
class TransferReport:
    speaker_accuracy: float
    prosody_correlation: float
    n_transfers: int

    def to_dict(self) -> dict:
        return asdict(self)


def transfer_suite(pipeline: TransferPipeline, utterances: Sequence[Utterance]) -> TransferReport:
    """Transfer every utterance to every other training speaker; score identity
    with the frozen classifier and prosody by energy-contour correlation."""
    hits, corrs, n = 0, [], 0
    for u, target in transfer_pairs(pipeline, utterances):
        out = pipeline.transfer(u, target)
        pred = pipeline.classifier.predict([out.normalized])[0]
        hits += int(pred == target)
        corrs.append(prosody_correlation(u.mel.frames, out.mel.frames))
        n += 1
    if n == 0:
        raise InvalidInputError("no transfer pairs")
    return TransferReport(hits / n, float(np.nanmean(corrs)), n)


def reconstruction_l1(pipeline: TransferPipeline, utterances: Sequence[Utterance]) -> float:
    """Mean absolute error of reconstructions in the normalised domain."""
    total, count = 0.0, 0
    for u in utterances:
        out = pipeline.reconstruct(u)
        total += float(np.abs(out.normalized - pipeline.normalizer.normalize(u.mel.frames)).sum())
        count += out.normalized.size
    return total / count
