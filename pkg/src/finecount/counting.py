"""Counter backends and mask specialization.

A class-agnostic counter prompted with a broad category deliberately
overcounts: it fires on every lookalike. Specialization multiplies the raw
density by the tuned relevance mask (or filters raw points through it), so
only the fine-grained target survives:  D_special = D_raw * mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import FinecountError
from .gridops import bilinear_resize, nearest_resize
from .specializer import ConceptEmbedding
from .taxonomy import CategorySpec


class CountKind(Enum):
    DENSITY = "density"
    POINTS = "points"


@dataclass
class CountField:
    """A counter's raw or specialized output.

    Exactly one of density/points is populated according to kind. The
    discarded list is filled by specialization on POINTS fields so overlays
    can show what the mask suppressed.
    """

    kind: CountKind
    density: np.ndarray | None = None
    points: list[tuple[float, float]] | None = None  # (x, y)
    source: str = ""
    prompt_used: str = ""
    discarded: list[tuple[float, float]] | None = None

    def __post_init__(self):
        if self.kind is CountKind.DENSITY:
            if self.density is None or self.points is not None:
                raise ValueError("DENSITY field must populate density and only density")
            self.density = np.asarray(self.density, dtype=float)
            if self.density.ndim != 2:
                raise ValueError(f"density must be 2-D, got {self.density.shape}")
            if not np.all(np.isfinite(self.density)) or np.any(self.density < 0):
                raise ValueError("density entries must be finite and >= 0")
        else:
            if self.points is None or self.density is not None:
                raise ValueError("POINTS field must populate points and only points")
            self.points = [(float(x), float(y)) for x, y in self.points]


class CounterBackend(Protocol):
    """Class-agnostic counter conditioned on a text prompt."""

    def count(self, image, prompt: str) -> CountField: ...


def _foreground(image, deviation: float) -> np.ndarray:
    """Pixels deviating from the dominant (median) brightness."""
    gray = np.asarray(image, dtype=float)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    return np.abs(gray - np.median(gray)) > deviation


class CentroidCounter:
    """Toy point counter: one point per connected foreground blob.

    Class-agnostic by construction; it counts anything that stands out from
    the background, which is exactly the overcounting regime specialization
    is meant to fix.
    """

    def __init__(self, deviation: float = 25.0, min_area: int = 4):
        self.deviation = deviation
        self.min_area = min_area

    def count(self, image, prompt: str) -> CountField:
        labels, n = ndimage.label(_foreground(image, self.deviation))
        points = []
        if n:
            areas = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
            centers = ndimage.center_of_mass(np.ones_like(labels), labels,
                                             index=range(1, n + 1))
            for area, (cy, cx) in zip(areas, centers):
                if area >= self.min_area:
                    points.append((float(cx), float(cy)))
        return CountField(kind=CountKind.POINTS, points=points,
                          source="centroid-blobs", prompt_used=prompt)


class BlobDensityCounter:
    """Toy density counter: unit mass spread uniformly over each blob."""

    def __init__(self, deviation: float = 25.0, min_area: int = 4):
        self.deviation = deviation
        self.min_area = min_area

    def count(self, image, prompt: str) -> CountField:
        fg = _foreground(image, self.deviation)
        labels, n = ndimage.label(fg)
        density = np.zeros(fg.shape, dtype=float)
        for i in range(1, n + 1):
            component = labels == i
            area = int(component.sum())
            if area >= self.min_area:
                density[component] = 1.0 / area
        return CountField(kind=CountKind.DENSITY, density=density,
                          source="blob-density", prompt_used=prompt)


def predict_mask(image, concept: ConceptEmbedding, backend) -> np.ndarray:
    """Relevance mask for the concept's category at image resolution.

    decode output is upsampled bilinearly: densities get a smooth
    re-weighting rather than patch-edge artifacts.
    """
    image = np.asarray(image)
    pred = backend.decode(backend.encode_image(image), concept.z)
    return bilinear_resize(pred, image.shape[0], image.shape[1])


def specialize(raw: CountField, mask: np.ndarray, point_tau: float = 0.5) -> CountField:
    """Re-weight a raw counter output with a [0,1] relevance mask.

    DENSITY: element-wise product. POINTS: a point survives iff the mask at
    its nearest pixel is >= point_tau; the discarded remainder is kept on the
    result for visualization.
    """
    mask = np.asarray(mask, dtype=float)
    if raw.kind is CountKind.DENSITY:
        if mask.shape != raw.density.shape:
            raise ValueError(
                f"mask {mask.shape} does not match density {raw.density.shape}"
            )
        return CountField(kind=CountKind.DENSITY, density=raw.density * mask,
                          source=raw.source, prompt_used=raw.prompt_used)
    h, w = mask.shape
    retained, discarded = [], []
    for x, y in raw.points:
        i = min(max(int(round(y)), 0), h - 1)
        j = min(max(int(round(x)), 0), w - 1)
        (retained if mask[i, j] >= point_tau else discarded).append((x, y))
    return CountField(kind=CountKind.POINTS, points=retained, source=raw.source,
                      prompt_used=raw.prompt_used, discarded=discarded)


def extract_count(out: CountField) -> float:
    """Scalar count: density sum or point cardinality."""
    if out.kind is CountKind.DENSITY:
        return float(out.density.sum())
    return float(len(out.points))


@dataclass
class Diagnostics:
    raw_count: float
    specialized_count: float
    kind: str
    retained: int | None = None
    discarded: int | None = None
    mask_mass_ratio: float | None = None

    def to_json(self) -> dict:
        return {
            "raw_count": self.raw_count,
            "specialized_count": self.specialized_count,
            "kind": self.kind,
            "retained": self.retained,
            "discarded": self.discarded,
            "mask_mass_ratio": self.mask_mass_ratio,
        }


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FinecountError as exc:
        raise type(exc)(f"[{stage}] {exc}") from exc
    except Exception as exc:
        raise FinecountError(f"[{stage}] {type(exc).__name__}: {exc}") from exc


def count_fine_grained(image, spec: CategorySpec, concept: ConceptEmbedding,
                       counter: CounterBackend, segmenter,
                       broad_prompt: str | None = None,
                       point_tau: float = 0.5):
    """Full specialization pipeline for one image.

    The counter runs under the broad prompt (the parent when present) to
    surface every candidate, then the tuned mask suppresses non-targets.
    Returns (count, Diagnostics); stage failures carry a stage tag.
    """
    broad = broad_prompt if broad_prompt is not None else (spec.parent or spec.name)
    raw = _staged("count", counter.count, image, broad)
    mask = _staged("mask", predict_mask, image, concept, segmenter)
    special = _staged("specialize", specialize, raw, mask, point_tau)
    count = extract_count(special)
    raw_count = extract_count(raw)
    diag = Diagnostics(raw_count=raw_count, specialized_count=count,
                       kind=special.kind.value)
    if special.kind is CountKind.POINTS:
        diag.retained = len(special.points)
        diag.discarded = len(special.discarded or [])
    else:
        diag.mask_mass_ratio = float(count / raw_count) if raw_count > 0 else None
    return count, diag


def write_overlay(image, mask, out: CountField, path, point_tau: float = 0.5) -> None:
    """Qualitative figure: mask alpha-blend plus retained/discarded markers."""
    from PIL import Image, ImageDraw

    image = np.asarray(image, dtype=float)
    # nearest keeps the binary look of coarse masks in overlays
    m = nearest_resize(np.asarray(mask, dtype=float), image.shape[0], image.shape[1])
    tint = np.zeros_like(image)
    tint[..., 1] = 255.0
    blended = (image * (1.0 - 0.35 * m[..., None]) + tint * 0.35 * m[..., None])
    canvas = Image.fromarray(np.clip(blended, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)

    def cross(x, y, color):
        r = 3
        draw.line([(x - r, y), (x + r, y)], fill=color, width=1)
        draw.line([(x, y - r), (x, y + r)], fill=color, width=1)

    if out.kind is CountKind.POINTS:
        for x, y in out.points:
            cross(x, y, (0, 160, 0))
        for x, y in out.discarded or []:
            cross(x, y, (220, 0, 0))
    canvas.save(path)


def save_diagnostics(diag: Diagnostics, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(diag.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
