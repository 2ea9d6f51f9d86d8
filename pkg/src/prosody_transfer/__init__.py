"""Fine-grained prosody transfer with an instance-normalised, variational,
temporally bottlenecked reference encoder and a parallel mel decoder."""

from .corpus import SyntheticSpec, generate_synthetic_corpus, load_corpus
from .model import ProsodyTransferModel, TransferPipeline
from .speaker_embedder import SpeakerClassifier, centroid, train_classifier
from .trainer import TrainConfig, anneal_alpha, train_finetune, train_initial

__version__ = "0.1.0"

__all__ = [
    "ProsodyTransferModel",
    "SpeakerClassifier",
    "SyntheticSpec",
    "TrainConfig",
    "TransferPipeline",
    "anneal_alpha",
    "centroid",
    "generate_synthetic_corpus",
    "load_corpus",
    "train_classifier",
    "train_finetune",
    "train_initial",
]
