"""Training-time augmentations for synthetic pairs.

Two schemes from the tuning recipe: (a) downscale the image to 50% and
zero-pad back to the original resolution, applying the identical transform to
the mask, which teaches scale robustness; (b) CutMix at the feature level,
swapping one spatial quadrant of a positive sample's feature grid with a
negative's and zeroing that quadrant's target, which plants distractor
evidence inside positive scenes.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..synthesis import PseudoPair


def downscale_pad(arr: np.ndarray) -> np.ndarray:
    """Subsample by 2 and zero-pad back to the input shape, content top-left.

    Works for 2-D masks and H x W x C images alike; the same index map is
    applied to both so image and mask stay aligned.
    """
    arr = np.asarray(arr)
    out = np.zeros_like(arr)
    small = arr[::2, ::2]
    out[: small.shape[0], : small.shape[1]] = small
    return out


def downscale_pair(pair: PseudoPair) -> PseudoPair:
    # Derived attention maps are dropped: they describe the original layout.
    return replace(
        pair,
        image=downscale_pad(pair.image),
        bin_mask=downscale_pad(pair.bin_mask),
        avg_map=None,
        cat_map=None,
    )


def augment(pair: PseudoPair, rng, downscale_prob: float = 0.5) -> PseudoPair:
    """Image-space augmentation view of one pair; identity when the coin says no."""
    if downscale_prob > 0 and rng.random() < downscale_prob:
        return downscale_pair(pair)
    return pair


def quadrant_slices(shape, quadrant: int):
    """Row/column slices of quadrant 0..3 (TL, TR, BL, BR) of a 2-D shape."""
    if quadrant not in (0, 1, 2, 3):
        raise ValueError(f"quadrant must be 0..3, got {quadrant}")
    h2, w2 = shape[0] // 2, shape[1] // 2
    rows = slice(0, h2) if quadrant < 2 else slice(h2, shape[0])
    cols = slice(0, w2) if quadrant % 2 == 0 else slice(w2, shape[1])
    return rows, cols


def quadrant_cutmix(pos_features, pos_target, neg_features, quadrant: int):
    """Swap one quadrant of a positive's features for the negative's.

    The swapped-in quadrant's target is zero (it shows the distractor); the
    rest keeps the positive mask. Returns (features, target), inputs untouched.
    """
    pos_features = np.asarray(pos_features)
    neg_features = np.asarray(neg_features)
    if pos_features.shape != neg_features.shape:
        raise ValueError(
            f"feature grids differ: {pos_features.shape} vs {neg_features.shape}"
        )
    features = pos_features.copy()
    sl = quadrant_slices(features.shape[:2], quadrant)
    features[sl] = neg_features[sl]
    target = np.asarray(pos_target).copy()
    target[quadrant_slices(target.shape, quadrant)] = 0
    return features, target
