"""Bottlenecked speaker classifier and the embeddings it produces."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint, load_module_arrays, module_arrays
from .corpus import Corpus, batch_order
from .exceptions import InvalidInputError, NameMismatchError, TrainingError
from .nn_core import LEAKY_SLOPE, LastStateGRU, dense, glorot_uniform_, lengths_to_mask, softmax
from .validation import check_labels, check_mel_list

MIN_FRAMES = 16


class SpeakerClassifierNet(nn.Module):
    """Stride-2 conv2d stack over (time, mel), a GRU over reduced time, then
    bottleneck and speaker projection. The bottleneck output is the embedding."""

    def __init__(self, n_mels: int, num_speakers: int, conv_channels: Sequence[int] = (32, 32, 64, 64),
                 gru_width: int = 128, bottleneck: int = 64):
        super().__init__()
        convs = []
        c_in, freq = 1, n_mels
        for c_out in conv_channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            glorot_uniform_(conv.weight)
            nn.init.zeros_(conv.bias)
            convs.append(conv)
            c_in, freq = c_out, (freq - 1) // 2 + 1
        self.convs = nn.ModuleList(convs)
        self.gru = LastStateGRU(c_in * freq, gru_width)
        self.bottleneck = dense(gru_width, bottleneck)
        self.projection = dense(bottleneck, num_speakers)

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor | None = None):
        """Return ``(embedding, logits)`` for a ``B x T x M`` batch."""
        if lengths is None:
            lengths = torch.full((mel.shape[0],), mel.shape[1], dtype=torch.long)
        h = mel.unsqueeze(1)
        for conv in self.convs:
            h = h * lengths_to_mask(lengths, h.shape[2])[:, None, :, None].to(h.dtype)
            h = F.leaky_relu(conv(h), LEAKY_SLOPE)
            lengths = (lengths - 1) // 2 + 1
        seq = h.permute(0, 2, 1, 3).flatten(2)
        embedding = self.bottleneck(self.gru(seq, lengths))
        return embedding, self.projection(embedding)


def pad_short(frames: np.ndarray, min_frames: int = MIN_FRAMES) -> np.ndarray:
    """Reflect-pad utterances shorter than the conv stack can reduce."""
    if frames.shape[0] >= min_frames:
        return frames
    if frames.shape[0] < 2:
        raise InvalidInputError(f"need at least 2 frames for the speaker classifier, got {frames.shape[0]}")
    return np.pad(frames, ((0, min_frames - frames.shape[0]), (0, 0)), mode="reflect")


def _stack(frames: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    padded = [pad_short(f) for f in frames]
    t_max = max(f.shape[0] for f in padded)
    out = np.zeros((len(padded), t_max, padded[0].shape[1]), dtype=np.float32)
    for i, f in enumerate(padded):
        out[i, : f.shape[0]] = f
    return torch.from_numpy(out), torch.tensor([f.shape[0] for f in padded], dtype=torch.long)


def centroid(embeddings) -> np.ndarray:
    """Per-coordinate mean of a non-empty set of embeddings."""
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidInputError("centroid of an empty embedding set")
    return arr.mean(axis=0)


class SpeakerClassifier(ClassifierMixin, BaseEstimator):
    """Speaker classifier whose bottleneck activations serve as speaker embeddings.

    ``X`` is a sequence of normalised ``T x M`` log-mels, ``y`` the speaker
    ids. ``transform`` returns embeddings; ``predict_proba`` the softmax over
    speakers seen in ``fit``.
    """

    def __init__(self, conv_channels=(32, 32, 64, 64), gru_width=128, bottleneck=64,
                 learning_rate=1e-3, max_steps=500, batch_size=8, eval_interval=25,
                 clip_norm=5.0, seed=0):
        self.conv_channels = conv_channels
        self.gru_width = gru_width
        self.bottleneck = bottleneck
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.eval_interval = eval_interval
        self.clip_norm = clip_norm
        self.seed = seed

    def _build(self, n_mels: int, n_classes: int) -> SpeakerClassifierNet:
        return SpeakerClassifierNet(n_mels, n_classes, tuple(self.conv_channels),
                                    self.gru_width, self.bottleneck)

    def fit(self, X, y, eval_set=None):
        frames = check_mel_list(X)
        y = check_labels(y, len(frames))
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise InvalidInputError("speaker classifier needs at least 2 speakers")
        targets = torch.from_numpy(np.searchsorted(self.classes_, y))
        self.n_mels_ = frames[0].shape[1]
        torch.manual_seed(self.seed)
        net = self._build(self.n_mels_, len(self.classes_))
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        if eval_set is None:
            eval_set = (frames, y)
        self.net_ = net
        self.history_ = []
        best = None
        lengths = [f.shape[0] for f in frames]
        order: list[list[int]] = []
        epoch = -1
        for step in range(self.max_steps):
            pos = step % max(1, -(-len(frames) // self.batch_size))
            if pos == 0:
                epoch += 1
                order = batch_order(lengths, self.batch_size, self.seed, epoch)
            group = order[pos]
            mel, lens = _stack([frames[i] for i in group])
            net.train()
            _, logits = net(mel, lens)
            loss = F.cross_entropy(logits, targets[group])
            if not torch.isfinite(loss):
                raise TrainingError("speaker classifier loss is not finite", step)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), self.clip_norm)
            opt.step()
            if (step + 1) % self.eval_interval == 0 or step + 1 == self.max_steps:
                acc, val_loss = self._evaluate(*eval_set)
                self.history_.append({"step": step + 1, "loss": loss.item(), "val_accuracy": acc,
                                      "val_loss": val_loss})
                key = (acc, -val_loss)
                if best is None or key > best[0]:
                    best = (key, copy.deepcopy(net.state_dict()))
        net.load_state_dict(best[1])
        net.eval()
        self.best_val_accuracy_ = best[0][0]
        return self

    def _evaluate(self, X, y) -> tuple[float, float]:
        probs = self.predict_proba(X)
        idx = np.searchsorted(self.classes_, np.asarray(y))
        acc = float(np.mean(probs.argmax(axis=1) == idx))
        nll = float(-np.mean(np.log(np.maximum(probs[np.arange(len(idx)), idx], 1e-12))))
        return acc, nll

    @torch.no_grad()
    def _forward(self, X, batch_size: int = 32):
        check_is_fitted(self, "net_")
        frames = check_mel_list(X, self.n_mels_)
        self.net_.eval()
        embs, logits = [], []
        for i in range(0, len(frames), batch_size):
            mel, lens = _stack(frames[i:i + batch_size])
            e, lg = self.net_(mel.to(next(self.net_.parameters()).dtype), lens)
            embs.append(e)
            logits.append(lg)
        return torch.cat(embs), torch.cat(logits)

    def transform(self, X) -> np.ndarray:
        """Speaker embeddings, one row per utterance."""
        return self._forward(X)[0].numpy()

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self._forward(X)[1]).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def centroids(self, X, y) -> dict[int, np.ndarray]:
        """Mean embedding per speaker label."""
        emb = self.transform(X)
        y = check_labels(y, len(emb))
        return {int(s): centroid(emb[y == s]) for s in np.unique(y)}

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "net_")
        return Checkpoint(module_arrays(self.net_, "classifier."), {
            "kind": "classifier",
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "classes": [int(c) for c in self.classes_],
            "n_mels": int(self.n_mels_),
        })

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SpeakerClassifier":
        if ckpt.meta.get("kind") != "classifier":
            raise NameMismatchError(f"checkpoint holds a {ckpt.meta.get('kind')!r} model, not a classifier")
        params = dict(ckpt.meta["params"])
        params["conv_channels"] = tuple(params["conv_channels"])
        est = cls(**params)
        est.classes_ = np.asarray(ckpt.meta["classes"])
        est.n_mels_ = int(ckpt.meta["n_mels"])
        est.net_ = est._build(est.n_mels_, len(est.classes_))
        load_module_arrays(est.net_, ckpt.arrays, "classifier.")
        est.net_.eval()
        return est


def corpus_xy(corpus: Corpus, split: str) -> tuple[list[np.ndarray], np.ndarray]:
    utts = corpus.utterances(split)
    return [corpus.normalize(u.mel.frames) for u in utts], np.array([u.speaker_id for u in utts])


def train_classifier(corpus: Corpus, **params) -> SpeakerClassifier:
    """Fit on the train split, selecting the best validation-accuracy state."""
    X, y = corpus_xy(corpus, "train")
    eval_set = corpus_xy(corpus, "val") if corpus.split_ids("val") else None
    return SpeakerClassifier(**params).fit(X, y, eval_set=eval_set)
