"""Synthetic image generation and attention-derived pseudo-annotations."""

from .ops import (
    AttentionStack,
    GenerationResult,
    GeneratorBackend,
    GeneratorCapabilities,
    Polarity,
    PseudoPair,
    average_attention,
    binarize,
    category_token_span,
    extract_category_map,
    normalize_map,
)
from .dataset import category_slug, load_pairs, persist_pairs, synthesize_dataset
from .mock_shapes import DEFAULT_SHAPES, MockShapesGenerator, SceneRecord, build_toy_benchmark

__all__ = [
    "AttentionStack",
    "GenerationResult",
    "GeneratorBackend",
    "GeneratorCapabilities",
    "Polarity",
    "PseudoPair",
    "average_attention",
    "binarize",
    "category_token_span",
    "extract_category_map",
    "normalize_map",
    "category_slug",
    "load_pairs",
    "persist_pairs",
    "synthesize_dataset",
    "DEFAULT_SHAPES",
    "MockShapesGenerator",
    "SceneRecord",
    "build_toy_benchmark",
]
