"""Command-line entry point.

Exit codes: 0 success, 2 usage or invalid arguments, 3 I/O failure,
4 missing prerequisite stage or untrained model.

A run directory (``--out``) accumulates stages::

    RUN/classifier.ckpt          train-classifier
    RUN/stage1/generator.ckpt    train
    RUN/finetune/generator.ckpt  finetune
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import SyntheticSpec, Utterance, generate_synthetic_corpus, load_corpus
from .exceptions import (
    CorpusError,
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    ProsodyTransferError,
)
from .features import MelConfig, mel_to_audio, read_durations, read_mel, write_mel
from .reference_encoder import EncoderConfig
from .speaker_embedder import SpeakerClassifier, train_classifier
from .synthesis import GeneratorConfig
from .trainer import Normalizer, TrainConfig, configure_determinism, train_finetune, train_initial

log = logging.getLogger("prosody_transfer")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_STATE = 0, 2, 3, 4


class StageError(ProsodyTransferError):
    """A prerequisite stage has not been run."""


def _defaults() -> dict:
    gen = GeneratorConfig().to_dict()
    for derived in ("n_mels", "num_phonemes", "speaker_dim"):
        gen.pop(derived)
    clf = SpeakerClassifier().get_params()
    clf["conv_channels"] = list(clf["conv_channels"])
    return {
        "corpus": asdict(SyntheticSpec()),
        "classifier": clf,
        "generator": gen,
        "train": TrainConfig().to_dict(),
        "finetune": TrainConfig.finetune().to_dict(),
        "eval": {"seed": 0, "probe_shuffles": 10},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise InvalidConfigError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_run_config(path: str | None, seed: int | None = None) -> dict:
    """Defaults, overlaid with the JSON file, overlaid with flags."""
    config = _defaults()
    if path:
        try:
            override = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"{path}: invalid JSON ({exc})") from None
        config = _merge(config, override)
    if seed is not None:
        for section in ("corpus", "classifier", "train", "finetune", "eval"):
            config[section]["seed"] = seed
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _echo_config(out: Path, config: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; run '{stage}' first")
    return path


def _generator_config(section: dict, corpus, classifier: SpeakerClassifier) -> GeneratorConfig:
    d = dict(section)
    d["encoder"] = EncoderConfig(**d["encoder"])
    return GeneratorConfig(n_mels=corpus.mel_config.n_mels, num_phonemes=corpus.num_phonemes,
                           speaker_dim=classifier.bottleneck, **d)


def cmd_gen_corpus(args) -> int:
    config = load_run_config(args.config, args.seed)
    spec = dict(config["corpus"])
    for flag, key in (("speakers", "num_speakers"), ("phonemes", "num_phonemes"),
                      ("utts", "utterances_per_speaker")):
        if getattr(args, flag) is not None:
            spec[key] = getattr(args, flag)
    config["corpus"] = spec
    root = generate_synthetic_corpus(args.out, SyntheticSpec(**spec))
    print(json.dumps({"corpus": str(root), "config_hash": config_hash(config)}))
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    configure_determinism()
    config = load_run_config(args.config, args.seed)
    corpus = load_corpus(args.corpus)
    params = dict(config["classifier"])
    params["conv_channels"] = tuple(params["conv_channels"])
    clf = train_classifier(corpus, **params)
    out = Path(args.out)
    _echo_config(out, config)
    save_checkpoint(out / "classifier.ckpt", clf.to_checkpoint())
    with open(out / "classifier_metrics.jsonl", "w", encoding="utf-8") as fh:
        for record in clf.history_:
            fh.write(json.dumps(record) + "\n")
    print(json.dumps({"classifier": str(out / "classifier.ckpt"),
                      "best_val_accuracy": clf.best_val_accuracy_}))
    return EXIT_OK


def _load_classifier(args, out: Path) -> SpeakerClassifier:
    path = Path(args.classifier) if args.classifier else out / "classifier.ckpt"
    return SpeakerClassifier.from_checkpoint(load_checkpoint(_require(path, "train-classifier")))


def cmd_train(args) -> int:
    configure_determinism()
    config = load_run_config(args.config, args.seed)
    out = Path(args.out)
    clf = _load_classifier(args, out)
    corpus = load_corpus(args.corpus)
    stage_dir = out / "stage1"
    resume = None
    if args.resume:
        resume = load_checkpoint(_require(stage_dir / "last.ckpt", "train"))
    gen_cfg = _generator_config(config["generator"], corpus, clf)
    cfg = TrainConfig.from_dict(config["train"])
    _echo_config(stage_dir, config)
    result = train_initial(corpus.utterances("train"), corpus.utterances("val"), clf,
                           Normalizer(corpus.norm_mean, corpus.norm_std), gen_cfg, cfg,
                           corpus.speakers, stage_dir, resume)
    print(json.dumps({"generator": str(stage_dir / "generator.ckpt"), "evals": result.evals[-1:]}))
    return EXIT_OK


def cmd_finetune(args) -> int:
    configure_determinism()
    config = load_run_config(args.config, args.seed)
    out = Path(args.out)
    stage1_path = Path(args.model) if args.model else out / "stage1" / "generator.ckpt"
    stage1 = load_checkpoint(_require(stage1_path, "train"))
    clf = _load_classifier(args, out)
    corpus = load_corpus(args.corpus)
    stage_dir = out / "finetune"
    resume = None
    if args.resume:
        resume = load_checkpoint(_require(stage_dir / "last.ckpt", "finetune"))
    cfg = TrainConfig.from_dict(config["finetune"])
    _echo_config(stage_dir, config)
    result = train_finetune(corpus.utterances("train"), corpus.utterances("val"), clf, stage1,
                            cfg, stage_dir, resume)
    print(json.dumps({"generator": str(stage_dir / "generator.ckpt"), "evals": result.evals[-1:]}))
    return EXIT_OK


def _load_pipeline(args):
    from .model import TransferPipeline

    model = load_checkpoint(_require(Path(args.model), "train"))
    if model.meta.get("kind") not in ("generator", "finetuned") or not model.meta.get("global_step"):
        raise StageError(f"{args.model} is not a trained generator checkpoint")
    clf = load_checkpoint(_require(Path(args.classifier), "train-classifier"))
    return TransferPipeline.from_checkpoints(model, clf), model


def _read_source(path: Path) -> Utterance:
    mel = read_mel(path)
    dur_path = path.with_suffix(".dur")
    if not dur_path.exists():
        raise FileNotFoundError(f"{dur_path} (durations for {path.name}) not found")
    return Utterance(path.stem, -1, mel, read_durations(dur_path))


def cmd_transfer(args) -> int:
    configure_determinism()
    pipeline, _ = _load_pipeline(args)
    utt = _read_source(Path(args.source_utt))
    result = pipeline.transfer(utt, args.target_speaker)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mel(out, result.mel)
    report = {"mel": str(out), "frames": result.mel.T,
              "target_speaker": pipeline.resolve_speaker(args.target_speaker)}
    if args.wav:
        from scipy.io import wavfile

        config = MelConfig(n_mels=result.mel.M, sample_rate=result.mel.sample_rate, hop=result.mel.hop)
        audio = mel_to_audio(result.mel, args.griffin_lim_iters, config)
        peak = max(float(np.abs(audio).max()), 1e-9)
        wavfile.write(args.wav, config.sample_rate, (audio / peak * 0.9).astype(np.float32))
        report["wav"] = args.wav
    print(json.dumps(report))
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation

    configure_determinism()
    pipeline, model = _load_pipeline(args)
    corpus = load_corpus(args.corpus)
    run_config = json.loads(json.dumps(model.meta))
    report: dict = {"suite": args.suite, "model": str(args.model), "config_hash": config_hash(run_config)}
    suites = ("cycle", "leakage", "prosody") if args.suite == "all" else (args.suite,)
    known = [u for s in ("train", "val", "test") for u in corpus.utterances(s)
             if u.speaker_id in pipeline.centroids]
    if "cycle" in suites:
        report["cycle"] = evaluation.cycle_suite(pipeline, corpus.utterances(args.cycle_split)).to_dict()
    if "leakage" in suites:
        report["leakage"] = evaluation.leakage_probe(pipeline, known, seed=args.seed).to_dict()
    if "prosody" in suites:
        report["prosody"] = evaluation.transfer_suite(pipeline, corpus.utterances("test")).to_dict()
        report["reconstruction_l1"] = evaluation.reconstruction_l1(pipeline, corpus.utterances("test"))
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prosody-transfer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write a synthetic multi-speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int)
    p.add_argument("--phonemes", type=int)
    p.add_argument("--utts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_corpus)

    for name, func, help_ in (("train-classifier", cmd_train_classifier, "fit the speaker classifier"),
                              ("train", cmd_train, "stage 1: reconstruction + annealed KL"),
                              ("finetune", cmd_finetune, "stage 2: adversarial fine-tuning")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        if name != "train-classifier":
            p.add_argument("--classifier", help="defaults to RUN/classifier.ckpt")
            p.add_argument("--resume", action="store_true", help="continue from the stage's last.ckpt")
        if name == "finetune":
            p.add_argument("--model", help="stage-1 checkpoint, defaults to RUN/stage1/generator.ckpt")
        p.set_defaults(func=func)

    p = sub.add_parser("transfer", help="transfer a source utterance's prosody to a target speaker")
    p.add_argument("--model", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--source-utt", required=True, help=".mel file with a sibling .dur file")
    p.add_argument("--target-speaker", required=True, help="speaker id or name")
    p.add_argument("--out", required=True, help="output .mel path")
    p.add_argument("--wav", help="also write a Griffin-Lim reconstruction")
    p.add_argument("--griffin-lim-iters", type=int, default=32)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="objective evaluation suites")
    p.add_argument("--model", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--suite", choices=("cycle", "leakage", "prosody", "all"), default="all")
    p.add_argument("--cycle-split", default="train", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (InvalidConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ProsodyTransferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
