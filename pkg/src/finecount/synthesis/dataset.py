"""Batch synthesis of pseudo-annotated training pairs, plus disk persistence.

Positive pairs carry the attention-derived mask for the target category;
negative pairs (hard distractors) carry an all-zero mask, which is the whole
supervision signal for suppression. Pairs persist as PNG + JSON sidecar under
``synth/<category>/<polarity>/``, inspectable and diffable.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..errors import InvalidSpecError, SynthesisError
from ..gridops import rle_decode, rle_encode
from ..rng import child_seed
from ..taxonomy import CategorySpec, PromptBundle
from .ops import (
    GeneratorBackend,
    Polarity,
    PseudoPair,
    average_attention,
    binarize,
    category_token_span,
    extract_category_map,
    normalize_map,
)


def _round_robin(total: int, k: int) -> list[int]:
    # 5 over [a, b] -> [3, 2]
    return [total // k + (1 if i < total % k else 0) for i in range(k)]


def _positive_pair(result, category: str, prompt: str, tau: float,
                   block_subset) -> PseudoPair:
    avg = average_attention(result.attention, block_subset)
    span = category_token_span(result.token_spans, category)
    cat_map = normalize_map(extract_category_map(avg, span, result.attention.grid))
    return PseudoPair(
        image=result.image,
        bin_mask=binarize(cat_map, tau),
        polarity=Polarity.POSITIVE,
        category=category,
        avg_map=avg,
        cat_map=cat_map,
        prompt=prompt,
    )


def _negative_pair(result, category: str, prompt: str) -> PseudoPair:
    # Attention deliberately not extracted: the target is the empty map.
    return PseudoPair(
        image=result.image,
        bin_mask=np.zeros(result.attention.grid, dtype=np.uint8),
        polarity=Polarity.NEGATIVE,
        category=category,
        prompt=prompt,
    )


def synthesize_dataset(
    spec: CategorySpec,
    bundle: PromptBundle,
    backend: GeneratorBackend,
    n_pos: int = 100,
    n_neg_total: int = 100,
    seed: int = 0,
    tau: float = 0.1,
    jobs: int = 1,
) -> list[PseudoPair]:
    """Generate ``n_pos`` positive and ``n_neg_total`` negative pseudo-pairs.

    Negatives are spread round-robin across ``spec.negatives``. Per-image
    failures are recorded and skipped; more than 20% failures aborts. The
    result order is stable: positives by prompt index, then each negative
    category in spec order.
    """
    if n_pos < 0 or n_neg_total < 0:
        raise InvalidSpecError("pair counts must be >= 0")
    if n_pos > 0 and not bundle.positive_prompts:
        raise SynthesisError(f"no positive prompts for {spec.name!r}")
    if n_neg_total > 0 and not spec.negatives:
        raise SynthesisError(
            f"{n_neg_total} negative pairs requested but {spec.name!r} has no negatives"
        )

    caps = backend.capabilities()
    block_subset = list(caps.attention_blocks) if caps.attention_blocks else None

    # (slot, category, polarity, prompt, image seed)
    tasks = []
    for i in range(n_pos):
        prompts = bundle.positive_prompts
        tasks.append((
            len(tasks), spec.name, Polarity.POSITIVE, prompts[i % len(prompts)],
            child_seed(seed, "synth", spec.name, "positive", str(i)),
        ))
    if n_neg_total > 0:
        per_neg = _round_robin(n_neg_total, len(spec.negatives))
        for cat, n_cat in zip(spec.negatives, per_neg):
            prompts = bundle.negative_prompts.get(cat)
            if not prompts:
                raise SynthesisError(f"bundle has no prompts for negative {cat!r}")
            for i in range(n_cat):
                tasks.append((
                    len(tasks), cat, Polarity.NEGATIVE, prompts[i % len(prompts)],
                    child_seed(seed, "synth", cat, "negative", str(i)),
                ))

    def run_task(task):
        slot, category, polarity, prompt, img_seed = task
        result = backend.generate(prompt, img_seed)
        if polarity is Polarity.POSITIVE:
            return slot, _positive_pair(result, category, prompt, tau, block_subset)
        return slot, _negative_pair(result, category, prompt)

    produced: dict[int, PseudoPair] = {}
    failures: list[tuple[str, str]] = []
    if jobs > 1 and caps.concurrent_safe:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda t: _guard(run_task, t), tasks))
    else:
        outcomes = [_guard(run_task, t) for t in tasks]
    for task, outcome in zip(tasks, outcomes):
        if isinstance(outcome, Exception):
            failures.append((task[3], f"{type(outcome).__name__}: {outcome}"))
        else:
            slot, pair = outcome
            produced[slot] = pair

    if tasks and len(failures) > 0.2 * len(tasks):
        detail = "; ".join(f"{p!r}: {e}" for p, e in failures[:5])
        raise SynthesisError(
            f"{len(failures)}/{len(tasks)} generations failed (first errors: {detail})"
        )
    return [produced[slot] for slot in sorted(produced)]


def _guard(fn, task):
    try:
        return fn(task)
    except Exception as exc:  # noqa: BLE001 - per-image isolation is the contract
        return exc


def category_slug(category: str) -> str:
    """Directory-safe form of a category name (lowercase, underscores)."""
    return "_".join(category.strip().lower().split())


def persist_pairs(pairs: list[PseudoPair], root) -> list[str]:
    """Write pairs under root/synth/<category>/<polarity>/ as PNG + sidecar."""
    from PIL import Image

    written = []
    counters: dict[tuple[str, str], int] = {}
    for pair in pairs:
        key = (category_slug(pair.category), pair.polarity.value)
        idx = counters.get(key, 0)
        counters[key] = idx + 1
        out_dir = os.path.join(root, "synth", key[0], key[1])
        os.makedirs(out_dir, exist_ok=True)
        stem = os.path.join(out_dir, f"{idx:04d}")
        Image.fromarray(np.asarray(pair.image, dtype=np.uint8)).save(stem + ".png")
        sidecar = {
            "category": pair.category,
            "polarity": pair.polarity.value,
            "prompt": pair.prompt,
            "grid": list(pair.bin_mask.shape),
            "mask_rle": rle_encode(pair.bin_mask),
        }
        with open(stem + ".json", "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(stem)
    return written


def load_pairs(root) -> list[PseudoPair]:
    """Rebuild pseudo-pairs from a persisted dataset directory."""
    from PIL import Image

    synth_root = os.path.join(root, "synth")
    if not os.path.isdir(synth_root):
        raise SynthesisError(f"no synth/ directory under {root}")
    pairs = []
    sidecars = []
    for dirpath, _dirnames, filenames in os.walk(synth_root):
        sidecars.extend(os.path.join(dirpath, n) for n in filenames if n.endswith(".json"))
    for path in sorted(sidecars):
        with open(path, encoding="utf-8") as f:
            meta = json.load(f)
        image = np.asarray(Image.open(path[:-5] + ".png").convert("RGB"))
        mask = rle_decode(meta["mask_rle"], tuple(meta["grid"])).astype(np.uint8)
        pairs.append(PseudoPair(
            image=image,
            bin_mask=mask,
            polarity=Polarity(meta["polarity"]),
            category=meta["category"],
            prompt=meta.get("prompt", ""),
        ))
    return pairs
