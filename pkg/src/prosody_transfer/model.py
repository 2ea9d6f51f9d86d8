"""Inference pipeline and the estimator-style front end for the whole system."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .corpus import Utterance
from .exceptions import InvalidInputError
from .features import MelSpectrogram, upsample_phonemes
from .reference_encoder import EncoderConfig
from .speaker_embedder import SpeakerClassifier
from .synthesis import Generator, GeneratorConfig
from .trainer import (
    Normalizer,
    TrainConfig,
    generator_from_checkpoint,
    train_finetune,
    train_initial,
)


@dataclass
class Transfer:
    mel: MelSpectrogram        # output in the stored (denormalised) log-mel domain
    normalized: np.ndarray     # T x M, network domain
    z_hat: np.ndarray          # T x H latent the decoder consumed


class TransferPipeline:
    """Frozen generator + classifier with the target-speaker centroids.

    All public methods take utterances in the stored log-mel domain and
    normalise internally.
    """

    def __init__(self, generator: Generator, classifier: SpeakerClassifier, normalizer: Normalizer,
                 centroids: dict[int, np.ndarray], speakers: dict[int, str] | None = None):
        self.generator = generator.eval()
        self.classifier = classifier
        self.normalizer = normalizer
        self.centroids = {int(k): np.asarray(v, dtype=np.float32) for k, v in centroids.items()}
        self.speakers = speakers or {k: f"spk{k:02d}" for k in self.centroids}
        self._dtype = next(generator.parameters()).dtype

    @classmethod
    def from_checkpoints(cls, generator_ckpt: Checkpoint, classifier_ckpt: Checkpoint) -> "TransferPipeline":
        gen = generator_from_checkpoint(generator_ckpt)
        clf = SpeakerClassifier.from_checkpoint(classifier_ckpt)
        a = generator_ckpt.arrays
        ids = generator_ckpt.meta["centroid_speakers"]
        centroids = {int(s): a["meta.centroids"][i] for i, s in enumerate(ids)}
        speakers = {int(k): v for k, v in generator_ckpt.meta["speakers"].items()}
        return cls(gen, clf, Normalizer(a["meta.norm_mean"], a["meta.norm_std"]), centroids, speakers)

    def resolve_speaker(self, speaker) -> int:
        if isinstance(speaker, str) and not speaker.isdigit():
            matches = [k for k, v in self.speakers.items() if v == speaker]
            if not matches or matches[0] not in self.centroids:
                raise InvalidInputError(f"unknown target speaker {speaker!r}")
            return matches[0]
        sid = int(speaker)
        if sid not in self.centroids:
            raise InvalidInputError(f"speaker {sid} has no centroid (not in the training set)")
        return sid

    def _tensors(self, utt: Utterance, frames: np.ndarray | None = None):
        x = self.normalizer.normalize(utt.mel.frames) if frames is None else frames
        ids = upsample_phonemes(utt.phonemes, x.shape[0])
        return (torch.from_numpy(x).to(self._dtype)[None],
                torch.from_numpy(ids)[None])

    def embed(self, normalized_frames: Sequence[np.ndarray]) -> np.ndarray:
        return self.classifier.transform(list(normalized_frames)).astype(np.float32)

    @torch.no_grad()
    def encode(self, utt: Utterance, frames: np.ndarray | None = None,
               embedding: np.ndarray | None = None) -> np.ndarray:
        """Deterministic ``T x H`` bottlenecked latent of ``utt`` (or of ``frames``,
        already normalised, aligned to ``utt``'s phonemes)."""
        x, ids = self._tensors(utt, frames)
        if embedding is None:
            embedding = self.embed([x[0].float().numpy()])[0]
        e = torch.from_numpy(np.asarray(embedding, dtype=np.float32)).to(self._dtype)[None]
        _, latent = self.generator.encode(x, ids, e, deterministic=True)
        return latent.z_hat[0].numpy()

    @torch.no_grad()
    def decode(self, utt: Utterance, z_hat: np.ndarray, embedding: np.ndarray) -> np.ndarray:
        _, ids = self._tensors(utt)
        y = self.generator.phoneme_encoder(ids)
        e = torch.from_numpy(np.asarray(embedding, dtype=np.float32)).to(self._dtype)[None]
        z = torch.from_numpy(np.asarray(z_hat)).to(self._dtype)[None]
        return self.generator.decoder(y, z, e)[0].numpy()

    def transfer(self, utt: Utterance, target_speaker) -> Transfer:
        """Source utterance prosody, target speaker centroid on the decoder side."""
        sid = self.resolve_speaker(target_speaker)
        z_hat = self.encode(utt)
        out = self.decode(utt, z_hat, self.centroids[sid])
        mel = MelSpectrogram(self.normalizer.denormalize(out), utt.mel.sample_rate, utt.mel.hop)
        return Transfer(mel, out.astype(np.float32), z_hat)

    def reconstruct(self, utt: Utterance) -> Transfer:
        """Same embedding on both sides, as during training."""
        x = self.normalizer.normalize(utt.mel.frames)
        e = self.embed([x])[0]
        z_hat = self.encode(utt, embedding=e)
        out = self.decode(utt, z_hat, e)
        mel = MelSpectrogram(self.normalizer.denormalize(out), utt.mel.sample_rate, utt.mel.hop)
        return Transfer(mel, out.astype(np.float32), z_hat)


class ProsodyTransferModel(TransformerMixin, BaseEstimator):
    """Fit the generator (and optionally fine-tune it adversarially) on utterances.

    ``fit`` takes a list of :class:`Utterance`; a fitted
    :class:`SpeakerClassifier` supplies embeddings. ``transform`` returns the
    deterministic bottlenecked latents, ``predict`` transfers every input
    utterance to ``target_speaker``.
    """

    def __init__(self, latent_dim=64, tau=8, encoder_channels=(128, 128, 128),
                 phoneme_embedding=128, phoneme_channels=(128, 128, 128), phoneme_gru=128,
                 decoder_channels=(256, 256, 256), decoder_gru=256, kernel_size=5,
                 steps=2000, batch_size=8, learning_rate=1e-3, anneal_steps=None,
                 recon_scale=1.0, finetune_steps=0, finetune_learning_rate=1e-4,
                 adv_weight=0.1, eval_interval=100, seed=0):
        self.latent_dim = latent_dim
        self.tau = tau
        self.encoder_channels = encoder_channels
        self.phoneme_embedding = phoneme_embedding
        self.phoneme_channels = phoneme_channels
        self.phoneme_gru = phoneme_gru
        self.decoder_channels = decoder_channels
        self.decoder_gru = decoder_gru
        self.kernel_size = kernel_size
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.anneal_steps = anneal_steps
        self.recon_scale = recon_scale
        self.finetune_steps = finetune_steps
        self.finetune_learning_rate = finetune_learning_rate
        self.adv_weight = adv_weight
        self.eval_interval = eval_interval
        self.seed = seed

    def generator_config(self, n_mels: int, num_phonemes: int, speaker_dim: int) -> GeneratorConfig:
        return GeneratorConfig(
            n_mels=n_mels, num_phonemes=num_phonemes, speaker_dim=speaker_dim,
            phoneme_embedding=self.phoneme_embedding, phoneme_conv=tuple(self.phoneme_channels),
            phoneme_gru=self.phoneme_gru, decoder_conv=tuple(self.decoder_channels),
            decoder_gru=self.decoder_gru, kernel_size=self.kernel_size,
            encoder=EncoderConfig(self.latent_dim, self.tau, tuple(self.encoder_channels), self.kernel_size))

    def fit(self, X: Sequence[Utterance], y=None, *, classifier: SpeakerClassifier,
            eval_set: Sequence[Utterance] = (), num_phonemes: int | None = None,
            normalizer: Normalizer | None = None):
        X = list(X)
        if not X or not all(isinstance(u, Utterance) for u in X):
            raise InvalidInputError("fit expects a non-empty list of Utterance objects")
        check_is_fitted(classifier, "net_")
        if normalizer is None:
            frames = np.concatenate([u.mel.frames for u in X]).astype(np.float64)
            normalizer = Normalizer(frames.mean(0).astype(np.float32),
                                    np.maximum(frames.std(0), 1e-5).astype(np.float32))
        if num_phonemes is None:
            num_phonemes = 1 + max(max(u.phonemes.ids) for u in X)
        gen_cfg = self.generator_config(X[0].mel.M, num_phonemes, classifier.bottleneck)
        cfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, learning_rate=self.learning_rate,
                          anneal_steps=self.anneal_steps, recon_scale=self.recon_scale,
                          eval_interval=self.eval_interval, seed=self.seed)
        result = train_initial(X, list(eval_set), classifier, normalizer, gen_cfg, cfg)
        self.stage1_ = result
        if self.finetune_steps:
            ft = TrainConfig.finetune(steps=self.finetune_steps, batch_size=self.batch_size,
                                      learning_rate=self.finetune_learning_rate, adv_weight=self.adv_weight,
                                      recon_scale=self.recon_scale, eval_interval=self.eval_interval,
                                      seed=self.seed)
            result = train_finetune(X, list(eval_set), classifier, result.best, ft)
            self.stage2_ = result
        self.checkpoint_ = result.best
        self.pipeline_ = TransferPipeline.from_checkpoints(result.best, classifier.to_checkpoint())
        return self

    def transform(self, X: Sequence[Utterance]) -> list[np.ndarray]:
        check_is_fitted(self, "pipeline_")
        return [self.pipeline_.encode(u) for u in X]

    def predict(self, X: Sequence[Utterance], target_speaker) -> list[MelSpectrogram]:
        check_is_fitted(self, "pipeline_")
        return [self.pipeline_.transfer(u, target_speaker).mel for u in X]

    def score(self, X: Sequence[Utterance], y=None) -> float:
        """Negative mean L1 reconstruction error in the normalised domain."""
        check_is_fitted(self, "pipeline_")
        errs, counts = 0.0, 0
        for u in X:
            out = self.pipeline_.reconstruct(u)
            target = self.pipeline_.normalizer.normalize(u.mel.frames)
            errs += float(np.abs(out.normalized - target).sum())
            counts += target.size
        return -errs / counts
