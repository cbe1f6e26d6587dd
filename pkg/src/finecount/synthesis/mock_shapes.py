"""Procedural scene generator with analytically known cross-attention.

Stands in for a text-to-image diffusion service: renders scenes of colored
parametric shapes (each shape kind playing the role of one fine-grained
subcategory) and emits attention maps equal to the per-patch occupancy of
the prompted category. Because the occupancy is computed from the same
geometry that painted the pixels, every derived pseudo-annotation has an
exact oracle, which is what makes the end-to-end experiments checkable.

The scene record attached to each generation result carries instance
centers, per-category counts, and per-category patch occupancy; evaluation
fixtures are built from the same geometry via :func:`build_toy_benchmark`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import BackendError
from ..rng import child_rng
from .ops import AttentionStack, GenerationResult, GeneratorCapabilities

IMAGE_SIZE = 128
PATCH = 16  # image is a 8x8 grid of 16px patches

BACKGROUND = (200, 200, 200)

# Bounding-circle factor covering every shape kind at nominal radius r:
# square 0.9r*sqrt(2) ~ 1.27r, diamond 1.2r, triangle ~ 1.2r.
_BOUND = 1.3


@dataclass(frozen=True)
class ShapeDef:
    kind: str  # disk | square | diamond | triangle
    color: tuple[int, int, int]


# Colors are chosen so patch-mean features are linearly separable per
# category, with red/yellow deliberately correlated (the lookalike pair).
DEFAULT_SHAPES = {
    "red disk": ShapeDef("disk", (230, 40, 35)),
    "yellow diamond": ShapeDef("diamond", (235, 200, 40)),
    "blue square": ShapeDef("square", (40, 80, 230)),
    "green triangle": ShapeDef("triangle", (40, 200, 80)),
}

# Broad parent category: renders a mix of all registered kinds.
BROAD_NAME = "shape"


@dataclass
class ShapeInstance:
    category: str
    kind: str
    color: tuple[int, int, int]
    center: tuple[float, float]  # (y, x) pixels
    radius: float


@dataclass
class SceneRecord:
    """Ground truth for one rendered scene."""

    instances: list[ShapeInstance] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    occupancy: dict[str, np.ndarray] = field(default_factory=dict)  # category -> (gh, gw)


def _norm(text: str) -> str:
    return " ".join(text.strip().lower().split())


def _coverage(kind: str, center, radius: float, size: int) -> np.ndarray:
    """Boolean pixel mask of one shape instance."""
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    if kind == "square":
        half = 0.9 * radius
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if kind == "diamond":
        return np.abs(yy - cy) + np.abs(xx - cx) <= 1.2 * radius
    if kind == "triangle":
        top = cy - radius
        return (yy >= top) & (yy <= cy + 0.8 * radius) & (np.abs(xx - cx) <= 0.5 * (yy - top))
    raise BackendError(f"unknown shape kind {kind!r}")


def _place_instances(defs: list[tuple[str, ShapeDef]], rng, size: int) -> list[ShapeInstance]:
    """Rejection-sample non-overlapping placements; crowded leftovers are dropped."""
    placed: list[ShapeInstance] = []
    for category, shape in defs:
        for _ in range(200):
            r = rng.uniform(7.0, 12.0)
            margin = _BOUND * r + 1.0
            cy = rng.uniform(margin, size - margin)
            cx = rng.uniform(margin, size - margin)
            ok = all(
                np.hypot(cy - p.center[0], cx - p.center[1]) >= _BOUND * (r + p.radius) + 2.0
                for p in placed
            )
            if ok:
                placed.append(ShapeInstance(category, shape.kind, shape.color, (cy, cx), r))
                break
    return placed


def _render(instances: list[ShapeInstance], size: int) -> tuple[np.ndarray, dict]:
    """Paint instances over the background; returns image and per-category pixel masks."""
    image = np.full((size, size, 3), BACKGROUND, dtype=np.uint8)
    masks: dict[str, np.ndarray] = {}
    for inst in instances:
        cov = _coverage(inst.kind, inst.center, inst.radius, size)
        image[cov] = inst.color
        if inst.category not in masks:
            masks[inst.category] = np.zeros((size, size), dtype=bool)
        masks[inst.category] |= cov
    return image, masks


def _patch_occupancy(mask: np.ndarray, patch: int) -> np.ndarray:
    gh, gw = mask.shape[0] // patch, mask.shape[1] // patch
    return mask.reshape(gh, patch, gw, patch).mean(axis=(1, 3))


def _build_scene(instances: list[ShapeInstance], size: int, patch: int):
    image, masks = _render(instances, size)
    counts: dict[str, int] = {}
    for inst in instances:
        counts[inst.category] = counts.get(inst.category, 0) + 1
    occupancy = {cat: _patch_occupancy(m, patch) for cat, m in masks.items()}
    return image, SceneRecord(instances=instances, counts=counts, occupancy=occupancy)


class MockShapesGenerator:
    """Deterministic stand-in generator; generate() is a pure function of (prompt, seed)."""

    # Loose reading of the count words; a real generator only roughly honors them.
    COUNT_RANGES = {
        "exactly two": (2, 2),
        "a few": (3, 5),
        "many": (5, 8),
        "hundreds of": (8, 12),
    }

    def __init__(self, image_size: int = IMAGE_SIZE, patch: int = PATCH,
                 shapes: dict[str, ShapeDef] | None = None,
                 head_weights=(0.9, 1.1), layers=(0, 1), off_attention: float = 0.01):
        if image_size % patch != 0:
            raise BackendError(f"image_size {image_size} not a multiple of patch {patch}")
        self.image_size = image_size
        self.patch = patch
        self.shapes = dict(DEFAULT_SHAPES if shapes is None else shapes)
        self.head_weights = tuple(head_weights)
        self.layers = tuple(layers)
        self.off_attention = off_attention

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch
        return (g, g)

    def capabilities(self) -> GeneratorCapabilities:
        return GeneratorCapabilities(
            image_size=self.image_size,
            steps=1,
            captured_blocks=self.layers,
            attention_blocks=None,  # average over everything we capture
            concurrent_safe=True,
        )

    def _match_category(self, prompt: str) -> str:
        """Longest registered name appearing in the prompt, or the broad mix."""
        text = _norm(prompt)
        hits = [name for name in self.shapes if _norm(name) in text]
        if hits:
            return max(hits, key=len)
        if BROAD_NAME in text.split() or f"{BROAD_NAME}s" in text.split():
            return BROAD_NAME
        raise BackendError(f"no registered shape category in prompt {prompt!r}")

    def _count_from_prompt(self, prompt: str, rng) -> int:
        text = _norm(prompt)
        for phrase, (lo, hi) in self.COUNT_RANGES.items():
            if phrase in text:
                return int(rng.integers(lo, hi + 1))
        return int(rng.integers(3, 9))

    def _instance_defs(self, category: str, n: int, rng) -> list[tuple[str, ShapeDef]]:
        if category == BROAD_NAME:
            names = sorted(self.shapes)
            picks = rng.integers(0, len(names), size=n)
            return [(names[i], self.shapes[names[i]]) for i in picks]
        return [(category, self.shapes[category])] * n

    def generate(self, prompt: str, seed: int) -> GenerationResult:
        category = self._match_category(prompt)
        rng = child_rng(seed, "mock-scene", _norm(prompt))
        n = self._count_from_prompt(prompt, rng)
        defs = self._instance_defs(category, n, rng)
        instances = _place_instances(defs, rng, self.image_size)
        image, scene = _build_scene(instances, self.image_size, self.patch)

        if category == BROAD_NAME:
            union = np.zeros(self.grid)
            for occ in scene.occupancy.values():
                union = np.maximum(union, occ)  # non-overlapping, but max is the safe union
            occupancy = union
        else:
            occupancy = scene.occupancy.get(category, np.zeros(self.grid))

        words = prompt.split()
        spans = {}
        for i, word in enumerate(words):
            key = word.strip().strip(".,;:!?\"'()").lower()
            spans.setdefault(key, (i, i + 1))

        cat_words = [w.lower() for w in category.split()]

        def match(key):
            # plural prompts ("shapes") must attend like their singular
            if key in cat_words:
                return key
            if key.endswith("s") and key[:-1] in cat_words:
                return key[:-1]
            return None

        occ_flat = occupancy.reshape(-1)
        s_text, s_image = len(words), occ_flat.size
        base = np.full((s_text, s_image), self.off_attention)
        for i, word in enumerate(words):
            hit = match(word.strip().strip(".,;:!?\"'()").lower())
            if hit is not None:
                # Last category word attends with full occupancy, earlier ones
                # at half strength, so the max-mass token rule picks the last.
                factor = 1.0 if hit == cat_words[-1] else 0.5
                base[i] = factor * occ_flat

        values = np.stack(
            [np.stack([base * w for w in self.head_weights]) for _ in self.layers]
        )
        stack = AttentionStack(values=values, layers=list(self.layers), grid=self.grid)
        return GenerationResult(
            image=image, attention=stack, token_spans=spans, extras={"scene": scene}
        )

    def render_scene(self, counts: dict[str, int], seed: int):
        """Multi-category scene with exact ground truth, for evaluation fixtures."""
        unknown = [c for c in counts if c not in self.shapes]
        if unknown:
            raise BackendError(f"unregistered categories {unknown}")
        defs = []
        for category in sorted(counts):
            defs.extend([(category, self.shapes[category])] * counts[category])
        rng = child_rng(seed, "mock-multi", json.dumps(sorted(counts.items())))
        order = rng.permutation(len(defs))
        instances = _place_instances([defs[i] for i in order], rng, self.image_size)
        return _build_scene(instances, self.image_size, self.patch)


def build_toy_benchmark(root, n_images: int = 12, seed: int = 0, parent: str = BROAD_NAME,
                        subcategories: list[str] | None = None,
                        generator: MockShapesGenerator | None = None) -> dict:
    """Write a small annotated benchmark of mixed-shape scenes under ``root``.

    Layout matches the evaluation loader: images/<id>.png plus
    annotations.json mapping id -> {parent, points:[{x, y, sub}]}.
    Returns the annotation dict.
    """
    from PIL import Image

    gen = generator or MockShapesGenerator()
    subs = sorted(subcategories or gen.shapes)
    rng = child_rng(seed, "toy-benchmark")

    image_dir = os.path.join(root, "images")
    os.makedirs(image_dir, exist_ok=True)

    annotations = {}
    for idx in range(n_images):
        k = int(rng.integers(2, min(4, len(subs)) + 1))
        chosen = sorted(rng.choice(subs, size=k, replace=False).tolist())
        counts = {c: int(rng.integers(2, 7)) for c in chosen}
        image, scene = gen.render_scene(counts, seed=int(rng.integers(0, 2**31)))
        image_id = f"scene_{idx:04d}"
        Image.fromarray(image).save(os.path.join(image_dir, image_id + ".png"))
        annotations[image_id] = {
            "parent": parent,
            "points": [
                {"x": float(inst.center[1]), "y": float(inst.center[0]), "sub": inst.category}
                for inst in scene.instances
            ],
        }

    with open(os.path.join(root, "annotations.json"), "w", encoding="utf-8") as f:
        json.dump(annotations, f, indent=2, sort_keys=True)
        f.write("\n")
    return annotations
