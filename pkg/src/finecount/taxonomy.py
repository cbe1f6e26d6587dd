"""Fine-grained categories, prompt templating, and negative-category sourcing.

A :class:`CategorySpec` names the target subcategory (e.g. "Canada Goose"),
an optional parent ("Waterfowl"), and the distractor categories used for
hard-negative supervision. Negatives come from one of three strategies:
suggested by an external language-model service, the parent category as a
one-vs-many distractor, or a static user-provided list.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Protocol

from .errors import InsufficientNegativesError, InvalidSpecError, SuggesterTransportError
from .rng import child_rng

PROMPT_TEMPLATE = "A photorealistic image of {COUNT} {CATEGORY}. {VIEW}, {LIGHT}"

COUNT_SLOTS = ["many", "hundreds of", "a few", "exactly two"]
VIEW_SLOTS = ["top-down view", "high angle", "viewed from a distance", "close-up", "macro shot"]
LIGHT_SLOTS = ["backlit", "soft lighting", "golden hour", "overcast", "sunlight", "dimly lit"]

NEGATIVE_SUGGESTION_PROMPT = (
    "Provide a diverse list of exactly {COUNT} object categories that are "
    "semantically similar to {CATEGORY} and are very likely to appear in the "
    "same everyday environment. The items should be familiar categories that "
    "are either visually similar or from a closely related taxonomy. Only "
    "provide the list and nothing else."
)


class NegativeSource(Enum):
    LLM_GENERATED = "llm"
    FINE_VS_BROAD = "fine_vs_broad"
    STATIC = "static"
    NONE = "none"


def _norm(name: str) -> str:
    """Case-insensitive, whitespace-normalized form used for comparisons."""
    return " ".join(name.strip().lower().split())


@dataclass
class CategorySpec:
    """Target subcategory plus its negative-category set.

    Invariants enforced at construction: the name is non-empty and never
    appears among the negatives; FINE_VS_BROAD requires a parent and pins
    negatives to [parent]; NONE keeps negatives empty.
    """

    name: str
    parent: str | None = None
    negatives: list[str] = field(default_factory=list)
    negative_source: NegativeSource = NegativeSource.NONE

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise InvalidSpecError("category name must be non-empty")
        if self.negative_source is NegativeSource.FINE_VS_BROAD:
            if not self.parent:
                raise InvalidSpecError("FINE_VS_BROAD requires a parent category")
            if self.negatives and self.negatives != [self.parent]:
                raise InvalidSpecError(
                    "FINE_VS_BROAD negatives must be exactly the parent category"
                )
            self.negatives = [self.parent]
        if self.negative_source is NegativeSource.NONE and self.negatives:
            raise InvalidSpecError("negative_source NONE requires an empty negatives list")
        target = _norm(self.name)
        if any(_norm(n) == target for n in self.negatives):
            raise InvalidSpecError(f"target {self.name!r} may not be its own negative")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "parent": self.parent,
            "negatives": list(self.negatives),
            "negative_source": self.negative_source.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CategorySpec":
        return cls(
            name=obj["name"],
            parent=obj.get("parent"),
            negatives=list(obj.get("negatives", [])),
            negative_source=NegativeSource(obj.get("negative_source", "none")),
        )


@dataclass
class PromptBundle:
    """Expanded synthesis prompts for the target and each negative category."""

    positive_prompts: list[str]
    negative_prompts: dict[str, list[str]]


def _slot_sequence(category: str, seed: int, n: int) -> list[tuple[str, str, str]]:
    """First ``n`` (COUNT, VIEW, LIGHT) triples for a category.

    One seeded permutation of the full 4x5x6 slot product, tiled. Any window
    of 120 consecutive prompts therefore contains each triple exactly once.
    """
    product = [(c, v, l) for c in COUNT_SLOTS for v in VIEW_SLOTS for l in LIGHT_SLOTS]
    rng = child_rng(seed, "prompt-slots", _norm(category))
    order = rng.permutation(len(product))
    return [product[order[i % len(product)]] for i in range(n)]


def _render_prompt(category: str, slots: tuple[str, str, str]) -> str:
    count, view, light = slots
    return PROMPT_TEMPLATE.format(COUNT=count, CATEGORY=category, VIEW=view, LIGHT=light)


def expand_prompts(spec: CategorySpec, n_per_category: int, seed: int) -> PromptBundle:
    """Expand the synthesis prompt template for the target and its negatives.

    Pure function of (spec, n_per_category, seed): same inputs give the same
    bundle. Negative categories reuse the positive template with the category
    substituted, each with its own seeded slot sequence.
    """
    if not spec.name or not spec.name.strip():
        raise InvalidSpecError("category name must be non-empty")
    if n_per_category < 1:
        raise InvalidSpecError(f"n_per_category must be >= 1, got {n_per_category}")

    positive = [
        _render_prompt(spec.name, s) for s in _slot_sequence(spec.name, seed, n_per_category)
    ]
    negative = {
        cat: [_render_prompt(cat, s) for s in _slot_sequence(cat, seed, n_per_category)]
        for cat in spec.negatives
    }
    return PromptBundle(positive_prompts=positive, negative_prompts=negative)


class NegativeSuggester(Protocol):
    """External service that proposes visually similar distractor categories.

    ``suggest`` receives the fully rendered request prompt and returns the raw
    response text (a newline- or comma-separated list). Transport failures
    should raise; they are wrapped as retriable errors.
    """

    def suggest(self, prompt: str) -> str: ...


class StaticSuggester:
    """Deterministic in-process suggester backed by a category -> text map."""

    def __init__(self, responses: dict[str, str]):
        self._responses = {_norm(k): v for k, v in responses.items()}

    def suggest(self, prompt: str) -> str:
        for key, response in self._responses.items():
            if key in prompt.lower():
                return response
        raise KeyError(f"no canned response matches prompt: {prompt!r}")


class HttpSuggester:
    """Thin adapter for an HTTP suggestion endpoint.

    POSTs {"prompt": ...} as JSON and expects the list text back, either as a
    raw body or under a "text" key. Endpoint and optional bearer token come
    from the constructor or the FINECOUNT_SUGGESTER_URL / _TOKEN environment
    variables; credentials are never written into artifacts.
    """

    def __init__(self, url: str | None = None, token: str | None = None, timeout: float = 30.0):
        self.url = url or os.environ.get("FINECOUNT_SUGGESTER_URL")
        self.token = token or os.environ.get("FINECOUNT_SUGGESTER_TOKEN")
        self.timeout = timeout
        if not self.url:
            raise InvalidSpecError(
                "HTTP suggester needs a URL (set FINECOUNT_SUGGESTER_URL)"
            )

    def suggest(self, prompt: str) -> str:
        import requests

        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            resp = requests.post(
                self.url, json={"prompt": prompt}, headers=headers, timeout=self.timeout
            )
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise SuggesterTransportError(f"suggester request failed: {exc}") from exc
        try:
            body = resp.json()
            if isinstance(body, dict) and "text" in body:
                return str(body["text"])
        except ValueError:
            pass
        return resp.text


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_suggestions(text: str) -> list[str]:
    """Parse a suggester response into a clean list of category names.

    Permissive by design: splits on newlines and commas, strips bullets,
    numbering, quotes and trailing periods, and drops empties. Order is
    preserved; duplicates are removed case-insensitively.
    """
    items: list[str] = []
    seen: set[str] = set()
    for line in text.splitlines():
        for piece in line.split(","):
            piece = _BULLET.sub("", piece).strip().strip("\"'").rstrip(".").strip()
            if not piece:
                continue
            key = _norm(piece)
            if key not in seen:
                seen.add(key)
                items.append(piece)
    return items


def source_negatives(
    spec: CategorySpec, k: int = 5, llm: NegativeSuggester | None = None
) -> CategorySpec:
    """Populate a spec's negatives according to its sourcing strategy.

    LLM_GENERATED asks the suggester for exactly ``k`` categories (the target
    itself is filtered out, duplicates dropped); FINE_VS_BROAD uses the parent;
    STATIC keeps the given list; NONE clears it. Returns a new spec.
    """
    source = spec.negative_source
    if source is NegativeSource.NONE:
        return replace(spec, negatives=[])
    if source is NegativeSource.STATIC:
        return replace(spec, negatives=list(spec.negatives))
    if source is NegativeSource.FINE_VS_BROAD:
        if not spec.parent:
            raise InvalidSpecError("FINE_VS_BROAD requires a parent category")
        return replace(spec, negatives=[spec.parent])

    # LLM_GENERATED
    if llm is None:
        raise InvalidSpecError("LLM_GENERATED sourcing requires a suggester client")
    if k < 1:
        raise InvalidSpecError(f"k must be >= 1, got {k}")
    prompt = NEGATIVE_SUGGESTION_PROMPT.format(COUNT=k, CATEGORY=spec.name)
    try:
        raw = llm.suggest(prompt)
    except SuggesterTransportError:
        raise
    except Exception as exc:
        raise SuggesterTransportError(f"suggester call failed: {exc}") from exc

    target = _norm(spec.name)
    candidates = [c for c in parse_suggestions(raw) if _norm(c) != target]
    if len(candidates) < k:
        raise InsufficientNegativesError(k, candidates)
    return replace(spec, negatives=candidates[:k])


def save_spec(spec: CategorySpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_spec(path: str) -> CategorySpec:
    with open(path, encoding="utf-8") as f:
        return CategorySpec.from_json(json.load(f))
