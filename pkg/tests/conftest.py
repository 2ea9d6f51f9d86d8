import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from prosody_transfer.corpus import SyntheticSpec, generate_synthetic_corpus, load_corpus
from prosody_transfer.trainer import configure_determinism

SMALL_SPEC = SyntheticSpec(num_speakers=3, num_phonemes=6, utterances_per_speaker=8, seed=11,
                           n_mels=16, val_per_speaker=1, test_per_speaker=2,
                           min_phonemes=4, max_phonemes=8)


@pytest.fixture(scope="session", autouse=True)
def _deterministic():
    configure_determinism()


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    return generate_synthetic_corpus(tmp_path_factory.mktemp("corpus") / "small", SMALL_SPEC)


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return load_corpus(small_corpus_dir)


TINY_CLASSIFIER = dict(conv_channels=(16, 16, 16, 16), gru_width=32, bottleneck=8, max_steps=200,
                       eval_interval=20)


@pytest.fixture(scope="session")
def tiny_classifier(small_corpus):
    from prosody_transfer.speaker_embedder import train_classifier

    return train_classifier(small_corpus, **TINY_CLASSIFIER)


@pytest.fixture(scope="session")
def tiny_pipeline(small_corpus, tiny_classifier):
    """A briefly trained stage-1 pipeline; quality is irrelevant, plumbing is not."""
    from helpers import tiny_gen_config
    from prosody_transfer.model import TransferPipeline
    from prosody_transfer.trainer import Normalizer, TrainConfig, train_initial

    cfg = TrainConfig(steps=60, batch_size=4, eval_interval=30)
    result = train_initial(small_corpus.utterances("train"), small_corpus.utterances("val"), tiny_classifier,
                           Normalizer(small_corpus.norm_mean, small_corpus.norm_std),
                           tiny_gen_config(small_corpus, tiny_classifier), cfg, small_corpus.speakers)
    return TransferPipeline.from_checkpoints(result.best, tiny_classifier.to_checkpoint())


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line for an acceptance criterion and return the verdict."""

    def report(cid: str, passed: bool, detail: str) -> bool:
        line = f"criterion {cid}: {'PASS' if passed else 'FAIL'} [{detail}]"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
