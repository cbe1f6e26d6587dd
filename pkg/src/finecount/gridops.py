"""Small grid utilities: resizing between patch grids and image resolution,
and run-length encoding for binary masks.

Resizes use the pixel-center convention: output pixel (i, j) samples the
source at ((i + 0.5) * h_in / h_out - 0.5, ...). Resizing to the same shape
is the identity, and bilinear output stays inside [min, max] of the input.
"""

from __future__ import annotations

import numpy as np


def _src_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def nearest_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a 2-D grid."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"expected 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    if (h, w) == (out_h, out_w):
        return grid.copy()
    rows = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h), 0, h - 1).astype(int)
    cols = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w), 0, w - 1).astype(int)
    return grid[np.ix_(rows, cols)]


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D grid, edge-clamped."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError(f"expected 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    if (h, w) == (out_h, out_w):
        return grid.copy()

    ys = _src_coords(out_h, h)
    xs = _src_coords(out_w, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]

    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run-length encode a binary mask, row-major.

    Returns alternating run lengths starting with the number of leading
    zeros (possibly 0). Sum of runs equals mask.size.
    """
    flat = np.asarray(mask).reshape(-1).astype(np.uint8)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`rle_encode`."""
    total = int(shape[0] * shape[1])
    if sum(runs) != total:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {total}")
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    value = 0
    for run in runs:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape(shape)
