"""Concept-embedding tuning: losses, augmentation, sharpness, training loop."""

from .augment import augment, downscale_pad, downscale_pair, quadrant_cutmix
from .losses import EPS, bce_grad, concept_loss, negative_loss, positive_loss
from .sharpness import scaled_sigma, sharpness
from .toy_backend import BilinearToySegmenter, color_features
from .tune import (
    AdamW,
    ConceptEmbedding,
    EpochRecord,
    InitStrategy,
    OptimizerStepper,
    SegmenterBackend,
    TuningConfig,
    load_concept,
    loss_and_grad,
    loss_over,
    save_concept,
    select_checkpoint,
    tune,
    write_history_csv,
)

__all__ = [
    "EPS",
    "AdamW",
    "BilinearToySegmenter",
    "ConceptEmbedding",
    "EpochRecord",
    "InitStrategy",
    "OptimizerStepper",
    "SegmenterBackend",
    "TuningConfig",
    "augment",
    "bce_grad",
    "color_features",
    "concept_loss",
    "downscale_pad",
    "downscale_pair",
    "load_concept",
    "loss_and_grad",
    "loss_over",
    "negative_loss",
    "positive_loss",
    "quadrant_cutmix",
    "save_concept",
    "scaled_sigma",
    "select_checkpoint",
    "sharpness",
    "tune",
    "write_history_csv",
]
