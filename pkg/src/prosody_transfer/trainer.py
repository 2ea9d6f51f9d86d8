"""Two-stage optimisation: reconstruction + annealed KL, then adversarial fine-tuning."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .adversarial import Discriminator, hinge_losses, sample_windows
from .checkpoint import (
    Checkpoint,
    load_module_arrays,
    load_checkpoint,
    load_optimizer_arrays,
    module_arrays,
    optimizer_arrays,
    save_checkpoint,
)
from .corpus import Batch, Utterance, batch_order, collate
from .exceptions import InvalidConfigError, NameMismatchError, TrainingError
from .speaker_embedder import SpeakerClassifier, centroid
from .synthesis import Generator, GeneratorConfig, GeneratorOutput

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    stage: str = "initial"
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    anneal_steps: int | None = None
    clip_norm: float = 5.0
    recon_scale: float = 1.0
    log_interval: int = 10
    eval_interval: int = 100
    seed: int = 0
    precision: str = "float32"
    adv_weight: float = 0.1
    disc_learning_rate: float = 1e-4
    window: int = 32
    windows_per_utterance: int = 4
    disc_channels: tuple[int, ...] = (32, 64, 128, 128)

    def __post_init__(self):
        self.disc_channels = tuple(self.disc_channels)
        if self.stage not in ("initial", "finetune"):
            raise InvalidConfigError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise InvalidConfigError("steps, batch_size and learning_rate must be positive")
        if self.anneal_steps is not None and self.anneal_steps < 1:
            raise InvalidConfigError("anneal_steps must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise InvalidConfigError(f"unknown precision {self.precision!r}")

    @classmethod
    def finetune(cls, **overrides) -> "TrainConfig":
        base = dict(stage="finetune", steps=500, learning_rate=1e-4)
        base.update(overrides)
        return cls(**base)

    @property
    def effective_anneal_steps(self) -> int:
        return self.anneal_steps or max(1, round(0.2 * self.steps))

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def anneal_alpha(step: int, anneal_steps: int) -> float:
    """KL weight rising linearly from 0 to 1 over ``anneal_steps``, then held."""
    if anneal_steps < 1:
        raise InvalidConfigError("anneal_steps must be >= 1")
    return min(1.0, max(step, 0) / anneal_steps)


def configure_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.mean) / self.std).astype(np.float32)

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        return (frames * self.std + self.mean).astype(np.float32)


class EmbeddedSet:
    """Utterances with their frozen-classifier embeddings, batched on demand."""

    def __init__(self, utterances: Sequence[Utterance], normalizer: Normalizer,
                 classifier: SpeakerClassifier):
        self.utterances = list(utterances)
        self.normalizer = normalizer
        frames = [normalizer.normalize(u.mel.frames) for u in self.utterances]
        self.embeddings = classifier.transform(frames).astype(np.float32) if frames else np.zeros((0, 0))

    def __len__(self) -> int:
        return len(self.utterances)

    def lengths(self) -> list[int]:
        return [u.T for u in self.utterances]

    def batch(self, idx: Sequence[int], dtype: torch.dtype = torch.float32) -> tuple[Batch, torch.Tensor]:
        b = collate([self.utterances[i] for i in idx], self.normalizer)
        if dtype != torch.float32:
            b = Batch(b.mel.to(dtype), b.phonemes, b.lengths, b.mask, b.speaker_ids, b.utt_ids)
        return b, torch.from_numpy(self.embeddings[list(idx)]).to(dtype)


class StepSchedule:
    """Maps a global step to its batch, reshuffling per epoch without hidden state,
    so a resumed run sees exactly the batches an unbroken run would."""

    def __init__(self, lengths: Sequence[int], batch_size: int, seed: int):
        self.lengths = list(lengths)
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = -(-len(self.lengths) // batch_size)
        self._cache: tuple[int, list[list[int]]] | None = None

    def __call__(self, step: int) -> list[int]:
        epoch, pos = divmod(step, self.per_epoch)
        if self._cache is None or self._cache[0] != epoch:
            self._cache = (epoch, batch_order(self.lengths, self.batch_size, self.seed, epoch))
        return self._cache[1][pos]


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step) * 7 + stream)


def speaker_centroids(train: EmbeddedSet) -> dict[int, np.ndarray]:
    ids = np.array([u.speaker_id for u in train.utterances])
    return {int(s): centroid(train.embeddings[ids == s]).astype(np.float32) for s in np.unique(ids)}


def _named(module: nn.Module) -> dict[int, str]:
    return {i: name for i, (name, _) in enumerate(module.named_parameters())}


def _adam(module: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


@torch.no_grad()
def validation_recon(gen: Generator, data: EmbeddedSet, batch_size: int = 16,
                     dtype: torch.dtype = torch.float32) -> float:
    """Element-weighted mean L1 over a set, deterministic encoder."""
    if len(data) == 0:
        return float("nan")
    gen.eval()
    total, count = 0.0, 0.0
    for start in range(0, len(data), batch_size):
        b, e = data.batch(range(start, min(start + batch_size, len(data))), dtype)
        out = gen(b.mel, b.phonemes, e, lengths=b.lengths, deterministic=True)
        total += float(out.l1_sum)
        count += float(out.n_elements)
    gen.train()
    return total / count


@dataclass
class TrainResult:
    generator: Generator
    best: Checkpoint
    last: Checkpoint
    history: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    discriminator: Discriminator | None = None


def _base_meta(kind: str, gen_cfg: GeneratorConfig, cfg: TrainConfig, step: int,
               speakers: dict[int, str], centroids: dict[int, np.ndarray]) -> dict:
    return {
        "kind": kind,
        "generator_config": gen_cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "global_step": int(step),
        "speakers": {str(k): v for k, v in sorted(speakers.items())},
        "centroid_speakers": sorted(int(k) for k in centroids),
    }


def _meta_arrays(normalizer: Normalizer, centroids: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    return {
        "meta.norm_mean": np.asarray(normalizer.mean, dtype=np.float32),
        "meta.norm_std": np.asarray(normalizer.std, dtype=np.float32),
        "meta.centroids": np.stack([centroids[k] for k in sorted(centroids)]).astype(np.float32),
    }


def build_generator(gen_cfg: GeneratorConfig, seed: int, dtype: torch.dtype = torch.float32) -> Generator:
    torch.manual_seed(seed)
    return Generator(gen_cfg).to(dtype)


def generator_from_checkpoint(ckpt: Checkpoint) -> Generator:
    if ckpt.meta.get("kind") not in ("generator", "finetuned"):
        raise NameMismatchError(f"checkpoint holds a {ckpt.meta.get('kind')!r} model, not a generator")
    gen = Generator(GeneratorConfig(**ckpt.meta["generator_config"]))
    load_module_arrays(gen, ckpt.arrays, "generator.")
    gen.eval()
    return gen


class _JsonLines:
    def __init__(self, path: Path | None, append: bool):
        self.fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh:
            self.fh.close()


def train_initial(train_utts: Sequence[Utterance], val_utts: Sequence[Utterance],
                  classifier: SpeakerClassifier, normalizer: Normalizer,
                  gen_cfg: GeneratorConfig, cfg: TrainConfig = TrainConfig(),
                  speakers: dict[int, str] | None = None, out_dir=None,
                  resume: Checkpoint | None = None,
                  callback: Callable[[int, GeneratorOutput], None] | None = None) -> TrainResult:
    """Stage 1: minimise masked L1 + alpha * KL with alpha annealed linearly.

    Writes ``metrics.jsonl``, ``eval.jsonl``, ``last.ckpt`` and
    ``generator.ckpt`` (best validation L1) into ``out_dir`` when given.
    """
    dtype = cfg.dtype
    train = EmbeddedSet(train_utts, normalizer, classifier)
    val = EmbeddedSet(val_utts, normalizer, classifier)
    centroids = speaker_centroids(train)
    speakers = speakers or {s: f"spk{s:02d}" for s in centroids}
    gen = build_generator(gen_cfg, cfg.seed, dtype)
    opt = _adam(gen, cfg.learning_rate)
    names = _named(gen)
    start = 0
    if resume is not None:
        load_module_arrays(gen, resume.arrays, "generator.")
        load_optimizer_arrays(opt, names, resume.arrays, "optim.generator.")
        start = int(resume.meta["global_step"])

    out = Path(out_dir) if out_dir is not None else None
    metrics = _JsonLines(out / "metrics.jsonl" if out else None, append=resume is not None)
    evals_log = _JsonLines(out / "eval.jsonl" if out else None, append=resume is not None)
    schedule = StepSchedule(train.lengths(), cfg.batch_size, cfg.seed)
    anneal = cfg.effective_anneal_steps

    def snapshot(step: int) -> Checkpoint:
        arrays = module_arrays(gen, "generator.")
        arrays.update(optimizer_arrays(opt, names, "optim.generator."))
        arrays.update(_meta_arrays(normalizer, centroids))
        meta = _base_meta("generator", gen_cfg, cfg, step, speakers, centroids)
        meta["best_val_recon"] = best_val
        return Checkpoint(arrays, meta)

    history, evals = [], []
    best_val, best_ckpt = float("inf"), None
    if resume is not None and out is not None and (out / "generator.ckpt").exists():
        # carry the best-so-far across the restart so selection matches an unbroken run
        best_ckpt = load_checkpoint(out / "generator.ckpt")
        best_val = float(best_ckpt.meta.get("val_recon", float("inf")))

    def evaluate(step: int) -> None:
        nonlocal best_val, best_ckpt
        v = validation_recon(gen, val if len(val) else train, dtype=dtype)
        record = {"step": step, "val_recon": v}
        evals.append(record)
        evals_log.write(record)
        if v < best_val:
            best_val = v
            best_ckpt = snapshot(step)
            best_ckpt.meta["val_recon"] = v
            if out:
                save_checkpoint(out / "generator.ckpt", best_ckpt)

    if start == 0:
        evaluate(0)
    gen.train()
    try:
        for step in range(start, cfg.steps):
            alpha = anneal_alpha(step, anneal)
            batch, e = train.batch(schedule(step), dtype)
            result = gen(batch.mel, batch.phonemes, e, lengths=batch.lengths,
                         generator=step_generator(cfg.seed, step))
            loss = result.loss(alpha, cfg.recon_scale)
            if not torch.isfinite(loss):
                raise TrainingError("generator loss is not finite", step)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(gen.parameters(), cfg.clip_norm)
            opt.step()
            if callback is not None:
                callback(step, result)
            if step % cfg.log_interval == 0:
                record = {"step": step, "loss": loss.item(), "recon": result.reconstruction.item(),
                          "kl": result.kl.item(), "alpha": alpha}
                history.append(record)
                metrics.write(record)
            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
                evaluate(step + 1)
                if out:
                    save_checkpoint(out / "last.ckpt", snapshot(step + 1))
    finally:
        metrics.close()
        evals_log.close()

    last = snapshot(max(cfg.steps, start))
    if best_ckpt is None:
        best_ckpt = last
    if out:
        save_checkpoint(out / "last.ckpt", last)
        save_checkpoint(out / "generator.ckpt", best_ckpt)
    load_module_arrays(gen, best_ckpt.arrays, "generator.")
    gen.eval()
    return TrainResult(gen, best_ckpt, last, history, evals)


def generator_losses(gen: Generator, disc: Discriminator, batch: Batch, e: torch.Tensor,
                     cfg: TrainConfig, step: int, alpha: float = 1.0):
    """Stage-1 loss, adversarial generator loss and their weighted total for one batch."""
    result = gen(batch.mel, batch.phonemes, e, lengths=batch.lengths,
                 generator=step_generator(cfg.seed, step))
    base = result.loss(alpha, cfg.recon_scale)
    rng = np.random.default_rng([cfg.seed, step, 2])
    fake = sample_windows(result.x_hat, batch.lengths, cfg.window, rng, cfg.windows_per_utterance, False)
    _, loss_g = hinge_losses(torch.zeros(1, dtype=base.dtype), disc(fake.windows))
    return result, base, loss_g, base + cfg.adv_weight * loss_g


@torch.no_grad()
def discriminator_accuracy(gen: Generator, disc: Discriminator, data: EmbeddedSet,
                           cfg: TrainConfig, seed: int = 0) -> float:
    """Fraction of held-out windows the critic places on the correct side of zero."""
    gen.eval()
    disc.eval()
    rng = np.random.default_rng(seed)
    correct, total = 0, 0
    for start in range(0, len(data), 16):
        b, e = data.batch(range(start, min(start + 16, len(data))), cfg.dtype)
        x_hat = gen(b.mel, b.phonemes, e, lengths=b.lengths, deterministic=True).x_hat
        real = disc(sample_windows(b.mel, b.lengths, cfg.window, rng, cfg.windows_per_utterance).windows)
        fake = disc(sample_windows(x_hat, b.lengths, cfg.window, rng, cfg.windows_per_utterance).windows)
        correct += int((real > 0).sum()) + int((fake < 0).sum())
        total += real.numel() + fake.numel()
    gen.train()
    disc.train()
    return correct / max(total, 1)


def train_finetune(train_utts: Sequence[Utterance], val_utts: Sequence[Utterance],
                   classifier: SpeakerClassifier, stage1: Checkpoint,
                   cfg: TrainConfig | None = None, out_dir=None,
                   resume: Checkpoint | None = None) -> TrainResult:
    """Stage 2: stage-1 loss (alpha held at 1) plus ``adv_weight * L_G``,
    alternating with one hinge-loss critic update per step."""
    cfg = cfg or TrainConfig.finetune()
    dtype = cfg.dtype
    normalizer = Normalizer(stage1.arrays["meta.norm_mean"], stage1.arrays["meta.norm_std"])
    speakers = {int(k): v for k, v in stage1.meta["speakers"].items()}
    gen_cfg = GeneratorConfig(**stage1.meta["generator_config"])
    gen = generator_from_checkpoint(stage1 if resume is None else resume).to(dtype)
    gen.train()
    torch.manual_seed(cfg.seed)
    disc = Discriminator(gen_cfg.n_mels, cfg.window, cfg.disc_channels).to(dtype)
    gen_params = {id(p) for p in gen.parameters()}
    if gen_params & {id(p) for p in disc.parameters()}:
        raise InvalidConfigError("generator and discriminator share parameters")
    opt_g = _adam(gen, cfg.learning_rate)
    opt_d = _adam(disc, cfg.disc_learning_rate)
    g_names, d_names = _named(gen), _named(disc)
    start = 0
    if resume is not None:
        load_module_arrays(disc, resume.arrays, "discriminator.")
        load_optimizer_arrays(opt_g, g_names, resume.arrays, "optim.generator.")
        load_optimizer_arrays(opt_d, d_names, resume.arrays, "optim.discriminator.")
        start = int(resume.meta["global_step"])

    train = EmbeddedSet(train_utts, normalizer, classifier)
    val = EmbeddedSet(val_utts, normalizer, classifier)
    centroids = speaker_centroids(train)
    schedule = StepSchedule(train.lengths(), cfg.batch_size, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    metrics = _JsonLines(out / "metrics.jsonl" if out else None, append=resume is not None)
    evals_log = _JsonLines(out / "eval.jsonl" if out else None, append=resume is not None)

    def snapshot(step: int) -> Checkpoint:
        arrays = module_arrays(gen, "generator.")
        arrays.update(module_arrays(disc, "discriminator."))
        arrays.update(optimizer_arrays(opt_g, g_names, "optim.generator."))
        arrays.update(optimizer_arrays(opt_d, d_names, "optim.discriminator."))
        arrays.update(_meta_arrays(normalizer, centroids))
        meta = _base_meta("finetuned", gen_cfg, cfg, step, speakers, centroids)
        meta["stage1_config"] = stage1.meta.get("train_config")
        return Checkpoint(arrays, meta)

    history, evals = [], []
    try:
        for step in range(start, cfg.steps):
            batch, e = train.batch(schedule(step), dtype)
            result, base, loss_g, total = generator_losses(gen, disc, batch, e, cfg, step)
            if not torch.isfinite(total):
                raise TrainingError("generator loss is not finite", step)

            rng = np.random.default_rng([cfg.seed, step, 1])
            real = sample_windows(batch.mel, batch.lengths, cfg.window, rng, cfg.windows_per_utterance)
            fake = sample_windows(result.x_hat.detach(), batch.lengths, cfg.window, rng,
                                  cfg.windows_per_utterance, is_real=False)
            loss_d, _ = hinge_losses(disc(real.windows), disc(fake.windows))
            if not torch.isfinite(loss_d):
                raise TrainingError("discriminator loss is not finite", step)

            # generator update against the critic as it was when L_G was computed
            opt_g.zero_grad()
            total.backward(inputs=list(gen.parameters()))
            nn.utils.clip_grad_norm_(gen.parameters(), cfg.clip_norm)
            opt_d.zero_grad()
            loss_d.backward(inputs=list(disc.parameters()))
            nn.utils.clip_grad_norm_(disc.parameters(), cfg.clip_norm)
            opt_g.step()
            opt_d.step()

            if step % cfg.log_interval == 0:
                record = {"step": step, "loss": total.item(), "recon": result.reconstruction.item(),
                          "kl": result.kl.item(), "alpha": 1.0, "loss_g": loss_g.item(),
                          "loss_d": loss_d.item()}
                history.append(record)
                metrics.write(record)
            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
                record = {"step": step + 1,
                          "val_recon": validation_recon(gen, val if len(val) else train, dtype=dtype),
                          "disc_accuracy": discriminator_accuracy(gen, disc, val if len(val) else train,
                                                                  cfg, cfg.seed)}
                evals.append(record)
                evals_log.write(record)
                if out:
                    save_checkpoint(out / "last.ckpt", snapshot(step + 1))
    finally:
        metrics.close()
        evals_log.close()

    last = snapshot(max(cfg.steps, start))
    if out:
        save_checkpoint(out / "last.ckpt", last)
        save_checkpoint(out / "generator.ckpt", last)
    gen.eval()
    disc.eval()
    return TrainResult(gen, last, last, history, evals, disc)
