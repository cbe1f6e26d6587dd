"""Cross-attention pseudo-annotation operations.

A generator backend returns, for each synthesized image, the stack of
cross-attention maps between text tokens and image patches. The chain

    average_attention -> extract_category_map -> normalize_map -> binarize

turns that stack into a coarse binary mask localizing the prompted category,
which downstream tuning uses as a pseudo-annotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np


@dataclass
class AttentionStack:
    """Per-(layer, head) attention, shape (L, H, S_text, S_image).

    ``layers`` holds the generator's block ids for each layer slot, and
    ``grid`` the patch grid (p_h, p_w) with p_h * p_w == S_image.
    """

    values: np.ndarray
    layers: list[int]
    grid: tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 4:
            raise ValueError(f"attention must be 4-D (L,H,S_text,S_image), got {self.values.shape}")
        n_layers = self.values.shape[0]
        if len(self.layers) != n_layers:
            raise ValueError(f"{len(self.layers)} layer ids for {n_layers} layers")
        ph, pw = self.grid
        if ph * pw != self.values.shape[3]:
            raise ValueError(f"grid {self.grid} does not tile S_image={self.values.shape[3]}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("attention entries must be finite and non-negative")


class Polarity(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass
class PseudoPair:
    """A synthetic image with its derived pseudo-annotation.

    ``bin_mask`` lives on the generator's patch grid. Negative pairs carry an
    all-zero mask and no extracted maps: they supervise suppression only.
    """

    image: np.ndarray
    bin_mask: np.ndarray
    polarity: Polarity
    category: str
    avg_map: np.ndarray | None = None
    cat_map: np.ndarray | None = None
    prompt: str = ""

    def __post_init__(self):
        self.bin_mask = np.asarray(self.bin_mask)
        if self.cat_map is not None:
            cm = np.asarray(self.cat_map, dtype=float)
            if cm.min() < 0 or cm.max() > 1:
                raise ValueError("cat_map entries must lie in [0, 1]")
            self.cat_map = cm
        if not np.isin(self.bin_mask, (0, 1)).all():
            raise ValueError("bin_mask must be binary")
        if self.polarity is Polarity.NEGATIVE and self.bin_mask.any():
            raise ValueError("negative pairs must carry an all-zero mask")


@dataclass
class GeneratorCapabilities:
    """What a generator backend produces and tolerates."""

    image_size: int
    steps: int
    captured_blocks: tuple[int, ...]
    # Blocks to average over; None means all captured blocks.
    attention_blocks: tuple[int, ...] | None = None
    concurrent_safe: bool = False


@dataclass
class GenerationResult:
    image: np.ndarray
    attention: AttentionStack
    token_spans: dict[str, tuple[int, int]]
    extras: dict = field(default_factory=dict)


class GeneratorBackend(Protocol):
    """Text-to-image backend that exposes its cross-attention."""

    def generate(self, prompt: str, seed: int) -> GenerationResult: ...

    def capabilities(self) -> GeneratorCapabilities: ...


def average_attention(
    stack: AttentionStack, block_subset: list[int] | None = None
) -> np.ndarray:
    """Mean attention over (layer, head) pairs, shape (S_text, S_image).

    ``block_subset`` restricts the mean to the named blocks (all captured
    blocks when absent). Which subset is appropriate is a property of the
    generator, declared in its capabilities.
    """
    if block_subset is None:
        selected = np.arange(len(stack.layers))
    else:
        if len(block_subset) == 0:
            raise ValueError("block_subset must not be empty")
        unknown = [b for b in block_subset if b not in stack.layers]
        if unknown:
            raise ValueError(f"blocks {unknown} not captured (have {stack.layers})")
        selected = np.array([stack.layers.index(b) for b in block_subset])
    return stack.values[selected].mean(axis=(0, 1))


def extract_category_map(
    avg: np.ndarray, span: tuple[int, int], grid: tuple[int, int]
) -> np.ndarray:
    """Attention row for the category tokens, reshaped to the patch grid.

    ``span`` is a half-open [start, end) token range. For a single token its
    row is taken directly; for a multi-token category the row with maximal
    total attention mass is selected (ties go to the lowest token index).
    """
    avg = np.asarray(avg, dtype=float)
    start, end = span
    if not (0 <= start < end <= avg.shape[0]):
        raise ValueError(f"span {span} out of bounds for {avg.shape[0]} tokens")
    if end - start == 1:
        row = avg[start]
    else:
        sums = avg[start:end].sum(axis=1)
        row = avg[start + int(np.argmax(sums))]
    ph, pw = grid
    if ph * pw != row.shape[0]:
        raise ValueError(f"grid {grid} does not tile {row.shape[0]} patches")
    return row.reshape(ph, pw)


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize a map into [0, 1]; a constant map becomes all zeros.

    A constant attention map carries no localization signal, so it maps to
    the empty target rather than an arbitrary level.
    """
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("map entries must be finite")
    lo = raw.min()
    hi = raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def binarize(cat_map: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Threshold a [0, 1] map at ``tau`` (>= tau maps to 1)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return (np.asarray(cat_map, dtype=float) >= tau).astype(np.uint8)


def _norm_word(word: str) -> str:
    return word.strip().strip(".,;:!?\"'()").lower()


def category_token_span(
    token_spans: dict[str, tuple[int, int]], category: str
) -> tuple[int, int]:
    """Token range covering a category name, from a backend's word->span map.

    Multi-word names take the union of their words' spans. Lookup keys are
    punctuation-stripped and lowercased.
    """
    normalized = {_norm_word(k): v for k, v in token_spans.items()}
    words = [_norm_word(w) for w in category.split()]
    missing = [w for w in words if w not in normalized]
    if missing:
        raise KeyError(f"category words {missing} not found in prompt token spans")
    starts, ends = zip(*(normalized[w] for w in words))
    return (min(starts), max(ends))
