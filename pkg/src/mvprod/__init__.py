"""Microvideo-product bidirectional retrieval, trained from scratch.

Contrastive two-tower training over synthetic multimodal pairs:
per-modality projectors, context-gated fusion, momentum query/key
encoders, a category-keyed multi-queue of hard negatives, and a
retrieval evaluation harness, all on a small numpy autodiff substrate.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, cosine_similarity
from .dataio import GenConfig, generate, load, split_dataset
from .losses import LossWeights, build_centroids, importance, info_nce
from .membank import MultiQueue, QueueEntry
from .model import Dims, init_params, momentum_update
from .optim import AdamState, adam_step, cosine_lr, grad_check
from .train import TrainConfig, init_state, run_experiment, train_step

__all__ = [
    "AdamState",
    "Dims",
    "GenConfig",
    "LossWeights",
    "MultiQueue",
    "QueueEntry",
    "Tensor",
    "TrainConfig",
    "adam_step",
    "backward",
    "build_centroids",
    "cosine_lr",
    "cosine_similarity",
    "generate",
    "grad_check",
    "importance",
    "info_nce",
    "init_params",
    "init_state",
    "load",
    "momentum_update",
    "run_experiment",
    "split_dataset",
    "train_step",
]
