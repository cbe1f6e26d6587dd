"""Flatness probe used for checkpoint selection.

s(z) = (1/K) sum_k max(0, L(z + delta_k) - L(z)),  delta_k ~ N(0, sigma^2 I)

A small s means the loss surface around z is flat under isotropic jitter;
epochs in the flattest quintile are the candidates checkpoint selection picks
the best validation loss from.
"""

from __future__ import annotations

import numpy as np


def sharpness(z: np.ndarray, loss_fn, K: int, sigma: float, rng) -> float:
    """Mean worst-case loss increase over K Gaussian perturbations of z."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    z = np.asarray(z, dtype=float)
    base = float(loss_fn(z))
    total = 0.0
    for _ in range(K):
        delta = rng.normal(0.0, sigma, size=z.shape)
        total += max(0.0, float(loss_fn(z + delta)) - base)
    return total / K


def scaled_sigma(z: np.ndarray, base_sigma: float) -> float:
    """Perturbation scale proportional to the embedding's RMS magnitude.

    sigma = base * ||z|| / sqrt(dim), so random-init (tiny norm) and
    text-init (unit-ish norm) embeddings are probed at comparable relative
    strength. Falls back to base for z = 0.
    """
    z = np.asarray(z, dtype=float)
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        return base_sigma
    return base_sigma * norm / np.sqrt(z.size)
