"""Hand-differentiable conditional segmenter for tests and toy experiments.

The decoder is a logistic model over 2-channel patch-color features,
overparameterized through a fixed random basis so the conditioning vector has
the contract's 512 dimensions: w = U z (3 effective parameters), and
prediction = sigmoid(logit_scale * (f1*w0 + f2*w1 + w2)) per patch. The
temperature keeps decisive probabilities within reach of a small-step
optimizer, the same trick contrastive encoders use. Everything except z is
frozen, gradients are closed-form, and the optimization problem is convex in
w, which keeps the end-to-end experiments reliable.

Features: f1 = R - B and f2 = G - (R + B)/2 of the mean patch color in
[0,1] units. Gray backgrounds land at the origin, and a patch partially
covered by a shape is the shape's feature scaled by its coverage.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..rng import child_rng
from ..synthesis.mock_shapes import DEFAULT_SHAPES

EMBED_DIM = 512


def color_features(rgb) -> np.ndarray:
    """Map an RGB triple (0..255) to the 2-channel feature space."""
    r, g, b = (float(c) / 255.0 for c in rgb)
    return np.array([r - b, g - (r + b) / 2.0])


def _norm(name: str) -> str:
    return " ".join(name.strip().lower().split())


class BilinearToySegmenter:
    """Frozen toy segmenter conditioned on a 512-d concept embedding."""

    embed_dim = EMBED_DIM

    def __init__(self, seed: int = 0, patch: int = 16,
                 known_colors: dict | None = None,
                 text_margin: float = 2.0, text_noise: float = 0.75,
                 logit_scale: float = 8.0):
        rng = child_rng(seed, "toy-decoder")
        # Rows are near-orthonormal (entries N(0, 1/512)), so U U^T ~ I_3 and
        # the pseudo-inverse embedding of a weight triple roughly preserves norm.
        self._basis = rng.normal(0.0, 1.0 / np.sqrt(EMBED_DIM), size=(3, EMBED_DIM))
        self._pinv = self._basis.T @ np.linalg.inv(self._basis @ self._basis.T)
        self.patch = patch
        self.text_margin = text_margin
        self.text_noise = text_noise
        self.logit_scale = logit_scale
        self._seed = seed
        if known_colors is None:
            known_colors = {name: d.color for name, d in DEFAULT_SHAPES.items()}
        self._known = {_norm(k): color_features(v) for k, v in known_colors.items()}

    # --- contract: encode_image / text_embed / decode (+ gradient) ---

    def encode_image(self, image) -> np.ndarray:
        """Patch-mean color features, shape (gh, gw, 2)."""
        img = np.asarray(image, dtype=float) / 255.0
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 image, got {img.shape}")
        h, w = img.shape[:2]
        if h % self.patch or w % self.patch:
            raise ValueError(f"image {h}x{w} not a multiple of patch {self.patch}")
        gh, gw = h // self.patch, w // self.patch
        means = img.reshape(gh, self.patch, gw, self.patch, 3).mean(axis=(1, 3))
        f1 = means[..., 0] - means[..., 2]
        f2 = means[..., 1] - (means[..., 0] + means[..., 2]) / 2.0
        return np.stack([f1, f2], axis=-1)

    def text_embed(self, name: str) -> np.ndarray:
        """Noisy prior embedding for a category name.

        For known names, least-squares weights separating that color from the
        other known colors and the background at the configured logit margin,
        perturbed by name-seeded noise (a stand-in for the gap between a text
        prior and the visual concept). Unknown names get small random vectors.
        """
        key = _norm(name)
        rng = child_rng(self._seed, "toy-text", key)
        if key not in self._known:
            return 0.02 * rng.normal(size=EMBED_DIM)
        anchors = list(self._known.items()) + [("", np.zeros(2))]  # background anchor
        design = np.stack([np.array([f[0], f[1], 1.0]) for _, f in anchors])
        target = np.array([
            self.text_margin if k == key else -self.text_margin for k, _ in anchors
        ])
        # Margin and noise are in logit units; divide out the temperature so
        # the returned embedding lands them where intended.
        logits, *_ = np.linalg.lstsq(design, target, rcond=None)
        logits = logits + self.text_noise * rng.normal(size=3)
        return self._pinv @ (logits / self.logit_scale)

    def weights(self, z) -> np.ndarray:
        """Effective (w1, w2, bias) triple for an embedding."""
        return self._basis @ np.asarray(z, dtype=float)

    def decode(self, features, z) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        w = self.weights(z)
        logits = features[..., 0] * w[0] + features[..., 1] * w[1] + w[2]
        return 1.0 / (1.0 + np.exp(-self.logit_scale * logits))

    def decode_vjp(self, features, z, upstream) -> np.ndarray:
        """Gradient of sum(upstream * decode(features, z)) with respect to z."""
        features = np.asarray(features, dtype=float)
        p = self.decode(features, z)
        d = self.logit_scale * np.asarray(upstream, dtype=float) * p * (1.0 - p)
        grad_w = np.array([
            float(np.sum(d * features[..., 0])),
            float(np.sum(d * features[..., 1])),
            float(np.sum(d)),
        ])
        return self._basis.T @ grad_w

    def param_checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self._basis).tobytes())
        h.update(f"{self.patch}:{self.text_margin}:{self.text_noise}:{self.logit_scale}".encode())
        for key in sorted(self._known):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self._known[key]).tobytes())
        return h.hexdigest()
