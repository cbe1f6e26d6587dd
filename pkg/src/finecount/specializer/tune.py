"""Concept-embedding tuning against a frozen conditional segmenter.

Only the 512-d embedding z moves; the backend stays frozen (and is checked
for it). Visual features are pre-extracted once, in both the full and the
downscale-padded variant, so epochs touch no image pixels. Checkpoint
selection prefers flat minima: among the flattest 20% of epochs by the
sharpness probe, the one with the best validation loss wins.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from ..errors import CapabilityError, FrozenBackendError, TuningError
from ..gridops import nearest_resize
from ..rng import child_rng
from ..synthesis import Polarity, PseudoPair
from ..taxonomy import CategorySpec
from .augment import downscale_pad, quadrant_cutmix
from .losses import bce_grad, negative_loss, positive_loss
from .sharpness import scaled_sigma, sharpness

EMBED_DIM = 512


class SegmenterBackend(Protocol):
    """Frozen open-vocabulary segmenter with a swappable conditioning vector.

    decode must be differentiable in z; backends expose that through
    decode_vjp(features, z, upstream) -> d(sum(upstream * decode))/dz.
    """

    def encode_image(self, image) -> np.ndarray: ...

    def text_embed(self, name: str) -> np.ndarray: ...

    def decode(self, features, z) -> np.ndarray: ...


class InitStrategy(Enum):
    TEXT_ENCODER = "text_encoder"
    RANDOM = "random"


@dataclass
class TuningConfig:
    epochs: int = 50
    lr: float = 5e-3
    plateau_factor: float = 0.9
    plateau_patience: int = 10
    val_fraction: float = 0.2
    bin_threshold: float = 0.1
    sharpness_K: int = 8
    sharpness_sigma: float = 1e-2
    cutmix_prob: float = 0.5
    downscale_prob: float = 0.5
    weight_decay: float = 0.01
    batch_size: int | None = None  # None = full batch
    init: InitStrategy = InitStrategy.TEXT_ENCODER
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.init, str):
            self.init = InitStrategy(self.init)
        if self.epochs < 1:
            raise TuningError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise TuningError(f"val_fraction must lie in (0,1), got {self.val_fraction}")
        if self.lr <= 0:
            raise TuningError(f"lr must be > 0, got {self.lr}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    sharpness: float
    lr: float


@dataclass
class ConceptEmbedding:
    """Tuned conditioning vector plus its training history."""

    z: np.ndarray
    category: str
    init: InitStrategy
    history: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = 0

    def __post_init__(self):
        if isinstance(self.init, str):
            self.init = InitStrategy(self.init)
        self.z = np.asarray(self.z, dtype=float).reshape(-1)
        if self.z.size != EMBED_DIM:
            raise TuningError(f"embedding must have {EMBED_DIM} entries, got {self.z.size}")


class OptimizerStepper(Protocol):
    """Update rule contract: consumes (z, grad, lr), returns the new z."""

    def step(self, z: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray: ...


class AdamW:
    """Adam with decoupled weight decay; the library's default stepper."""

    def __init__(self, weight_decay: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, z, grad, lr):
        if self.m is None:
            self.m = np.zeros_like(z)
            self.v = np.zeros_like(z)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return z - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * z)


@dataclass
class _Sample:
    is_pos: bool
    feat_full: np.ndarray
    feat_down: np.ndarray
    target_full: np.ndarray | None
    target_down: np.ndarray | None


def _init_embedding(spec, backend, cfg) -> np.ndarray:
    if cfg.init is InitStrategy.TEXT_ENCODER:
        z = np.asarray(backend.text_embed(spec.name), dtype=float).reshape(-1).copy()
        if z.size != EMBED_DIM:
            raise TuningError(f"text_embed returned {z.size} dims, expected {EMBED_DIM}")
        return z
    dim = getattr(backend, "embed_dim", EMBED_DIM)
    return 0.02 * child_rng(cfg.seed, "init", spec.name).normal(size=dim)


def _prepare_samples(pairs, backend, grid_probe_z) -> list[_Sample]:
    feats = [(backend.encode_image(p.image),
              backend.encode_image(downscale_pad(p.image))) for p in pairs]
    grid = backend.decode(feats[0][0], grid_probe_z).shape
    samples = []
    for pair, (feat_full, feat_down) in zip(pairs, feats):
        if pair.polarity is Polarity.POSITIVE:
            mask = pair.bin_mask.astype(float)
            target_full = nearest_resize(mask, *grid)
            target_down = nearest_resize(downscale_pad(mask), *grid)
        else:
            target_full = target_down = None
        samples.append(_Sample(pair.polarity is Polarity.POSITIVE,
                               feat_full, feat_down, target_full, target_down))
    return samples


def _split_indices(indices: list[int], val_fraction: float, rng) -> tuple[list, list]:
    order = rng.permutation(len(indices))
    shuffled = [indices[i] for i in order]
    n_val = int(round(val_fraction * len(indices)))
    return shuffled[n_val:], shuffled[:n_val]


def loss_over(z, items, backend) -> float:
    """L_concept for pre-assembled (features, target, is_positive) items."""
    pos, neg = [], []
    for feat, target, is_pos in items:
        pred = backend.decode(feat, z)
        if is_pos:
            pos.append(positive_loss(pred, target))
        else:
            neg.append(negative_loss(pred))
    total = 0.0
    if pos:
        total += float(np.mean(pos))
    if neg:
        total += float(np.mean(neg))
    return total


def loss_and_grad(z, items, backend):
    """L_concept and its analytic gradient w.r.t. z over one batch."""
    if not hasattr(backend, "decode_vjp"):
        raise CapabilityError(
            f"{type(backend).__name__} exposes no decode_vjp; tuning needs gradients"
        )
    n_pos = sum(1 for *_, is_pos in items if is_pos)
    n_neg = len(items) - n_pos
    loss = 0.0
    grad = np.zeros_like(np.asarray(z, dtype=float))
    for feat, target, is_pos in items:
        pred = backend.decode(feat, z)
        if is_pos:
            loss += positive_loss(pred, target) / n_pos
            upstream = bce_grad(pred, target) / n_pos
        else:
            loss += negative_loss(pred) / n_neg
            upstream = bce_grad(pred, np.zeros_like(pred)) / n_neg
        grad += backend.decode_vjp(feat, z, upstream)
    return loss, grad


def select_checkpoint(history: list[EpochRecord]) -> int:
    """Best-validation epoch among the flattest 20% (lowest sharpness).

    Ties break toward the lower epoch at both stages, so the result does not
    depend on the order history records are presented in.
    """
    if not history:
        raise TuningError("empty training history")
    quota = max(1, math.ceil(0.2 * len(history)))
    flattest = sorted(history, key=lambda r: (r.sharpness, r.epoch))[:quota]
    best = min(flattest, key=lambda r: (r.val_loss, r.epoch))
    return best.epoch


def tune(spec: CategorySpec, pairs: list[PseudoPair], backend,
         cfg: TuningConfig | None = None,
         stepper: OptimizerStepper | None = None) -> ConceptEmbedding:
    """Tune a concept embedding for spec.name on synthetic pseudo-pairs."""
    cfg = cfg if cfg is not None else TuningConfig()
    pos_idx = [i for i, p in enumerate(pairs) if p.polarity is Polarity.POSITIVE]
    neg_idx = [i for i, p in enumerate(pairs) if p.polarity is Polarity.NEGATIVE]
    if not pos_idx:
        raise TuningError(f"tuning {spec.name!r} needs at least one positive pair")
    if not hasattr(backend, "decode_vjp"):
        raise CapabilityError(
            f"{type(backend).__name__} exposes no decode_vjp; tuning needs gradients"
        )

    checksum = getattr(backend, "param_checksum", None)
    checksum_before = checksum() if checksum else None

    z = _init_embedding(spec, backend, cfg)
    samples = _prepare_samples(pairs, backend, z)

    split_rng = child_rng(cfg.seed, "split", spec.name)
    train_pos, val_pos = _split_indices(pos_idx, cfg.val_fraction, split_rng)
    train_neg, val_neg = _split_indices(neg_idx, cfg.val_fraction, split_rng)
    if not train_pos:  # keep at least one positive trainable
        train_pos, val_pos = [val_pos[0]], val_pos[1:]
    train = train_pos + train_neg
    val = val_pos + val_neg

    def clean_items(indices):
        return [(samples[i].feat_full, samples[i].target_full, samples[i].is_pos)
                for i in indices]

    train_clean = clean_items(train)
    val_items = clean_items(val)

    stepper = stepper if stepper is not None else AdamW(weight_decay=cfg.weight_decay)
    lr = cfg.lr
    best_val = math.inf
    stall = 0
    history: list[EpochRecord] = []
    snapshots: list[np.ndarray] = []

    for epoch in range(cfg.epochs):
        erng = child_rng(cfg.seed, "epoch", spec.name, str(epoch))
        order = [train[i] for i in erng.permutation(len(train))]
        if cfg.batch_size is None:
            batches = [order]
        else:
            batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]

        epoch_loss = 0.0
        for batch in batches:
            items = []
            for idx in batch:
                s = samples[idx]
                use_down = erng.random() < cfg.downscale_prob
                feat = s.feat_down if use_down else s.feat_full
                target = s.target_down if use_down else s.target_full
                if s.is_pos and train_neg and erng.random() < cfg.cutmix_prob:
                    other = samples[train_neg[int(erng.integers(len(train_neg)))]]
                    neg_feat = other.feat_down if use_down else other.feat_full
                    feat, target = quadrant_cutmix(feat, target, neg_feat,
                                                   int(erng.integers(4)))
                items.append((feat, target, s.is_pos))
            loss, grad = loss_and_grad(z, items, backend)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TuningError(
                    f"non-finite loss/gradient for {spec.name!r} at epoch {epoch} "
                    f"(loss={loss}, lr={lr})"
                )
            z = stepper.step(z, grad, lr)
            epoch_loss += loss
        train_loss = epoch_loss / len(batches)

        val_loss = loss_over(z, val_items, backend) if val_items else loss_over(
            z, train_clean, backend)
        srng = child_rng(cfg.seed, "sharpness", spec.name, str(epoch))
        sharp = sharpness(
            z, lambda zz: loss_over(zz, train_clean, backend),
            cfg.sharpness_K, scaled_sigma(z, cfg.sharpness_sigma), srng,
        )
        history.append(EpochRecord(epoch, float(train_loss), float(val_loss),
                                   float(sharp), float(lr)))
        snapshots.append(z.copy())

        if val_loss < best_val - 1e-12:
            best_val = val_loss
            stall = 0
        else:
            stall += 1
            if stall >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                stall = 0

    if checksum_before is not None and checksum() != checksum_before:
        raise FrozenBackendError(
            f"segmenter parameters changed while tuning {spec.name!r}"
        )

    selected = select_checkpoint(history)
    return ConceptEmbedding(z=snapshots[selected], category=spec.name,
                            init=cfg.init, history=history, selected_epoch=selected)


def save_concept(concept: ConceptEmbedding, path, extra: dict | None = None) -> None:
    """Write a concept to JSON (schema: category, init, z, selected_epoch, history)."""
    doc = {
        "category": concept.category,
        "init": concept.init.value,
        "z": [float(v) for v in concept.z],
        "selected_epoch": concept.selected_epoch,
        "history": [
            {"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss,
             "sharpness": r.sharpness, "lr": r.lr}
            for r in concept.history
        ],
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_concept(path) -> ConceptEmbedding:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    history = [EpochRecord(**r) for r in doc.get("history", [])]
    return ConceptEmbedding(
        z=np.asarray(doc["z"], dtype=float),
        category=doc["category"],
        init=InitStrategy(doc.get("init", "text_encoder")),
        history=history,
        selected_epoch=int(doc.get("selected_epoch", 0)),
    )


def write_history_csv(history: list[EpochRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_loss", "sharpness", "lr"])
        for r in history:
            writer.writerow([r.epoch, f"{r.train_loss:.10g}", f"{r.val_loss:.10g}",
                             f"{r.sharpness:.10g}", f"{r.lr:.10g}"])
