import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prosody_transfer.adversarial import Discriminator
from prosody_transfer.checkpoint import Checkpoint, decode, encode, load_checkpoint, save_checkpoint
from prosody_transfer.exceptions import (
    ChecksumError,
    FormatError,
    InvalidConfigError,
    NameMismatchError,
    TrainingError,
)
from prosody_transfer.trainer import (
    EmbeddedSet,
    Normalizer,
    StepSchedule,
    TrainConfig,
    anneal_alpha,
    build_generator,
    generator_from_checkpoint,
    generator_losses,
    step_generator,
    train_finetune,
    train_initial,
)

from helpers import tiny_gen_config


def run_stage1(corpus, clf, out=None, resume=None, callback=None, **overrides):
    cfg = TrainConfig(**{**dict(steps=40, batch_size=4, log_interval=5, eval_interval=20), **overrides})
    return train_initial(corpus.utterances("train"), corpus.utterances("val"), clf,
                         Normalizer(corpus.norm_mean, corpus.norm_std), tiny_gen_config(corpus, clf), cfg,
                         corpus.speakers, out, resume, callback)


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# ------------------------------------------------------------------ annealing and config

def test_anneal_alpha_examples():
    assert anneal_alpha(0, 400) == 0.0
    assert anneal_alpha(100, 400) == 0.25
    assert anneal_alpha(400, 400) == 1.0
    assert anneal_alpha(10_000, 400) == 1.0
    with pytest.raises(InvalidConfigError):
        anneal_alpha(3, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 5000), st.integers(0, 5000), st.integers(1, 3000))
def test_anneal_alpha_monotone_and_clamped(a, b, n):
    lo, hi = sorted((a, b))
    assert 0.0 <= anneal_alpha(lo, n) <= anneal_alpha(hi, n) <= 1.0


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.effective_anneal_steps == 400
    assert TrainConfig(steps=7).effective_anneal_steps == 1
    assert TrainConfig.finetune().stage == "finetune"
    for bad in (dict(stage="third"), dict(batch_size=0), dict(learning_rate=0.0), dict(anneal_steps=0),
                dict(precision="float16")):
        with pytest.raises(InvalidConfigError):
            TrainConfig(**bad)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidConfigError):
        TrainConfig.from_dict({"steps": 3, "lr": 1e-3})


def test_step_schedule_covers_each_epoch():
    lengths = [5, 9, 3, 7, 7, 2, 11]
    sched = StepSchedule(lengths, 3, seed=4)
    assert sched.per_epoch == 3
    for epoch in range(3):
        seen = sorted(i for s in range(3) for i in sched(epoch * 3 + s))
        assert seen == list(range(7))
    fresh = StepSchedule(lengths, 3, seed=4)
    assert [fresh(s) for s in (7, 2, 5)] == [sched(s) for s in (7, 2, 5)]


def test_step_generator_streams_differ():
    draw = lambda g: torch.randn(3, generator=g)
    assert torch.equal(draw(step_generator(1, 5)), draw(step_generator(1, 5)))
    assert not torch.equal(draw(step_generator(1, 5)), draw(step_generator(1, 6)))
    assert not torch.equal(draw(step_generator(1, 5, 0)), draw(step_generator(1, 5, 1)))


# ------------------------------------------------------------------ checkpoint format

def _sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint({"a.weight": rng.normal(size=(3, 4)).astype(np.float32),
                       "b": rng.normal(size=5),
                       "scalar": np.float32(2.5).reshape(())},
                      {"kind": "generator", "global_step": 7})


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = _sample_ckpt()
    raw = encode(ck)
    assert raw[:4] == b"CCKP"
    back = decode(raw)
    assert back.meta == ck.meta
    for k, v in ck.arrays.items():
        assert back.arrays[k].dtype == v.dtype and back.arrays[k].tobytes() == v.tobytes()
    path = save_checkpoint(tmp_path / "x.ckpt", ck)
    assert path.read_bytes() == raw
    assert not (tmp_path / "x.ckpt.tmp").exists()
    assert encode(load_checkpoint(path)) == raw


def test_checkpoint_corruption_detected():
    raw = bytearray(encode(_sample_ckpt()))
    flipped = bytearray(raw)
    flipped[40] ^= 0x01
    with pytest.raises(ChecksumError):
        decode(bytes(flipped))
    with pytest.raises(FormatError):
        decode(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        decode(bytes(raw[:4]) + (2).to_bytes(2, "little") + bytes(raw[6:]))
    with pytest.raises(FormatError):
        decode(bytes(raw[:12]))
    with pytest.raises(FormatError):
        encode(Checkpoint({"x": np.zeros(3, dtype=np.int64)}))


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_classifier_checkpoint_rejected_as_generator(tiny_classifier):
    with pytest.raises(NameMismatchError):
        generator_from_checkpoint(tiny_classifier.to_checkpoint())


# ------------------------------------------------------------------ stage 1

@pytest.fixture(scope="module")
def stage1_run(small_corpus, tiny_classifier, tmp_path_factory):
    out = tmp_path_factory.mktemp("stage1")
    return run_stage1(small_corpus, tiny_classifier, out), out


def test_stage1_outputs_and_metrics(stage1_run):
    result, out = stage1_run
    for name in ("metrics.jsonl", "eval.jsonl", "last.ckpt", "generator.ckpt"):
        assert (out / name).exists()
    rows = read_jsonl(out / "metrics.jsonl")
    assert len(rows) == 40 // 5
    assert [r["step"] for r in rows] == list(range(0, 40, 5))
    for r in rows:
        assert set(r) == {"step", "loss", "recon", "kl", "alpha"}
        assert r["alpha"] == anneal_alpha(r["step"], 8)
    assert [r["step"] for r in read_jsonl(out / "eval.jsonl")] == [0, 20, 40]
    best = load_checkpoint(out / "generator.ckpt")
    assert best.meta["kind"] == "generator"
    assert best.meta["val_recon"] == min(r["val_recon"] for r in result.evals)
    assert load_checkpoint(out / "last.ckpt").meta["global_step"] == 40


def test_stage1_two_runs_are_byte_identical(small_corpus, tiny_classifier, stage1_run, tmp_path):
    _, out = stage1_run
    run_stage1(small_corpus, tiny_classifier, tmp_path)
    for name in ("last.ckpt", "generator.ckpt", "metrics.jsonl"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


class Interrupt(Exception):
    pass


def test_resume_matches_unbroken_run(small_corpus, tiny_classifier, stage1_run, tmp_path):
    _, full = stage1_run

    def stop(step, _):
        if step == 20:
            raise Interrupt

    with pytest.raises(Interrupt):
        run_stage1(small_corpus, tiny_classifier, tmp_path, callback=stop)
    resume = load_checkpoint(tmp_path / "last.ckpt")
    assert resume.meta["global_step"] == 20
    run_stage1(small_corpus, tiny_classifier, tmp_path, resume=resume)
    a, b = read_jsonl(full / "metrics.jsonl"), read_jsonl(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in a] == [r["step"] for r in b]
    for ra, rb in zip(a, b):
        assert abs(ra["loss"] - rb["loss"]) <= 1e-5
    final_a, final_b = load_checkpoint(full / "last.ckpt"), load_checkpoint(tmp_path / "last.ckpt")
    for k in final_a.arrays:
        np.testing.assert_allclose(final_a.arrays[k], final_b.arrays[k], atol=1e-5)
    assert load_checkpoint(tmp_path / "generator.ckpt").meta["val_recon"] == pytest.approx(
        load_checkpoint(full / "generator.ckpt").meta["val_recon"], abs=1e-6)


def test_stage1_loss_decreases(small_corpus, tiny_classifier):
    result = run_stage1(small_corpus, tiny_classifier, steps=200, log_interval=10, eval_interval=200)
    first, last = result.history[0]["recon"], np.mean([r["recon"] for r in result.history[-3:]])
    assert last < 0.7 * first
    assert result.evals[-1]["val_recon"] < 0.7 * result.evals[0]["val_recon"]


def test_divergence_raises_with_step(small_corpus, tiny_classifier, monkeypatch):
    import prosody_transfer.trainer as trainer_mod

    built = []
    monkeypatch.setattr(trainer_mod, "build_generator",
                        lambda *a, **k: built.append(build_generator(*a, **k)) or built[-1])

    def poison(step, _):
        if step == 2:
            with torch.no_grad():
                for p in built[0].parameters():
                    p.fill_(float("nan"))

    with pytest.raises(TrainingError) as err:
        run_stage1(small_corpus, tiny_classifier, callback=poison, steps=10)
    assert err.value.step == 3


# ------------------------------------------------------------------ stage 2

def test_zero_adversarial_weight_reduces_to_stage1(small_corpus, tiny_classifier):
    gcfg = tiny_gen_config(small_corpus, tiny_classifier)
    norm = Normalizer(small_corpus.norm_mean, small_corpus.norm_std)
    data = EmbeddedSet(small_corpus.utterances("train"), norm, tiny_classifier)
    batch, e = data.batch([0, 3, 5])
    cfg = TrainConfig.finetune(adv_weight=0.0, window=8)
    gen = build_generator(gcfg, 0)
    disc = Discriminator(gcfg.n_mels, 8, (4, 4, 4, 4))

    _, base, _, total = generator_losses(gen, disc, batch, e, cfg, step=3)
    g_total = torch.autograd.grad(total, list(gen.parameters()), allow_unused=True)
    ref = gen(batch.mel, batch.phonemes, e, lengths=batch.lengths, generator=step_generator(cfg.seed, 3))
    ref_loss = ref.loss(1.0, cfg.recon_scale)
    g_ref = torch.autograd.grad(ref_loss, list(gen.parameters()), allow_unused=True)
    assert total.item() == pytest.approx(ref_loss.item(), abs=1e-6)
    for a, b in zip(g_total, g_ref):
        if a is None or b is None:
            assert a is None and b is None
        else:
            assert torch.allclose(a, b, atol=1e-6)


@pytest.fixture(scope="module")
def finetune_run(stage1_run, small_corpus, tiny_classifier, tmp_path_factory):
    out = tmp_path_factory.mktemp("finetune")
    stage1 = load_checkpoint(stage1_run[1] / "generator.ckpt")
    cfg = TrainConfig.finetune(steps=12, batch_size=4, log_interval=3, eval_interval=6, window=8,
                               disc_channels=(4, 4, 4, 4))
    result = train_finetune(small_corpus.utterances("train"), small_corpus.utterances("val"),
                            tiny_classifier, stage1, cfg, out)
    return result, out, stage1, cfg


def test_finetune_outputs(finetune_run):
    result, out, stage1, _ = finetune_run
    rows = read_jsonl(out / "metrics.jsonl")
    assert [r["step"] for r in rows] == [0, 3, 6, 9]
    assert all({"loss_g", "loss_d"} <= set(r) and r["alpha"] == 1.0 for r in rows)
    assert all(r["loss_d"] >= 0 for r in rows)
    evals = read_jsonl(out / "eval.jsonl")
    assert [r["step"] for r in evals] == [6, 12]
    assert all(0.0 <= r["disc_accuracy"] <= 1.0 for r in evals)
    ck = load_checkpoint(out / "generator.ckpt")
    assert ck.meta["kind"] == "finetuned"
    assert ck.meta["stage1_config"] == stage1.meta["train_config"]


def test_finetune_parameters_disjoint_and_round_trip(finetune_run):
    result, out, _, cfg = finetune_run
    gen, disc = result.generator, result.discriminator
    assert not {id(p) for p in gen.parameters()} & {id(p) for p in disc.parameters()}
    ck = load_checkpoint(out / "last.ckpt")
    gen2 = generator_from_checkpoint(ck)
    for (n, p), (_, q) in zip(gen.state_dict().items(), gen2.state_dict().items()):
        assert torch.equal(p, q), n
    disc_keys = [k for k in ck.arrays if k.startswith("discriminator.")]
    assert disc_keys
    for name, p in disc.state_dict().items():
        assert np.array_equal(ck.arrays["discriminator." + name], p.numpy())


def test_finetune_resume_matches(finetune_run, small_corpus, tiny_classifier, tmp_path):
    result, out, stage1, cfg = finetune_run
    half = TrainConfig.from_dict({**cfg.to_dict(), "steps": 6})
    train_finetune(small_corpus.utterances("train"), small_corpus.utterances("val"),
                   tiny_classifier, stage1, half, tmp_path)
    resume = load_checkpoint(tmp_path / "last.ckpt")
    train_finetune(small_corpus.utterances("train"), small_corpus.utterances("val"),
                   tiny_classifier, stage1, cfg, tmp_path, resume)
    a, b = read_jsonl(out / "metrics.jsonl"), read_jsonl(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in a] == [r["step"] for r in b]
    for ra, rb in zip(a, b):
        assert abs(ra["loss"] - rb["loss"]) <= 1e-5 and abs(ra["loss_d"] - rb["loss_d"]) <= 1e-5
