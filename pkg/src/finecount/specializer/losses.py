"""Joint positive / hard-negative BCE objective for concept tuning.

The concept loss is the sum of two class-balanced means: binary cross-entropy
against the pseudo-mask over positive samples, and against the empty mask over
negative samples. Predictions are probabilities (post-sigmoid backend
contract), clamped to [EPS, 1-EPS] before the logs.
"""

from __future__ import annotations

import numpy as np

from ..gridops import nearest_resize
from .. import synthesis

EPS = 1e-7


def _align_target(pred: np.ndarray, target) -> np.ndarray:
    target = np.asarray(target, dtype=float)
    if target.shape == pred.shape:
        return target
    if pred.ndim != 2 or target.ndim != 2:
        raise ValueError(
            f"cannot align target {target.shape} to prediction {pred.shape}"
        )
    return nearest_resize(target, *pred.shape)


def positive_loss(pred, target_mask) -> float:
    """Mean BCE between a predicted [0,1] grid and a binary pseudo-mask.

    The target is nearest-neighbor resized to the prediction's grid when the
    shapes differ (pseudo-masks are coarse by construction).
    """
    pred = np.asarray(pred, dtype=float)
    target = _align_target(pred, target_mask)
    p = np.clip(pred, EPS, 1.0 - EPS)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p)))


def negative_loss(pred) -> float:
    """BCE against the all-zero mask: every activation is a false positive."""
    pred = np.asarray(pred, dtype=float)
    p = np.clip(pred, EPS, 1.0 - EPS)
    return float(-np.mean(np.log1p(-p)))


def bce_grad(pred, target_mask) -> np.ndarray:
    """d(positive_loss)/d(pred), elementwise.

    Zero where the clamp saturates: the clamped loss is flat there, and the
    analytic gradient must match finite differences of the actual function.
    """
    pred = np.asarray(pred, dtype=float)
    target = _align_target(pred, target_mask)
    p = np.clip(pred, EPS, 1.0 - EPS)
    inside = (pred > EPS) & (pred < 1.0 - EPS)
    g = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0)
    return g / pred.size


def concept_loss(batch) -> float:
    """Combined objective over a batch of (prediction, PseudoPair).

    mean of positive BCE over POSITIVE items plus mean of negative BCE over
    NEGATIVE items; a polarity with no items contributes zero.
    """
    if not batch:
        raise ValueError("concept_loss needs a non-empty batch")
    pos, neg = [], []
    for pred, pair in batch:
        if pair.polarity is synthesis.Polarity.POSITIVE:
            pos.append(positive_loss(pred, pair.bin_mask))
        else:
            neg.append(negative_loss(pred))
    total = 0.0
    if pos:
        total += float(np.mean(pos))
    if neg:
        total += float(np.mean(neg))
    return total
