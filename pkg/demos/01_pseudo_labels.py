"""
From generated image to pseudo-annotation
=========================================

One synthesis prompt goes in, a coarse binary mask comes out. The chain:
generate an image while capturing cross-attention, average the maps over
layers and heads, pull out the row for the category tokens, min-max
normalize, threshold. No human labels anywhere.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from finecount.synthesis import (
    MockShapesGenerator,
    average_attention,
    binarize,
    category_token_span,
    extract_category_map,
    normalize_map,
)

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# The mock generator stands in for a diffusion backend: same contract
# (image + attention stack + token spans), deterministic, instant.
generator = MockShapesGenerator()
prompt = "A photorealistic image of five red disk. Top-down view, studio lighting"
result = generator.generate(prompt, seed=42)

print("prompt:", prompt)
print("image:", result.image.shape, "attention:", result.attention.values.shape)

# Step 1: mean over every captured (layer, head) pair.
avg = average_attention(result.attention)

# Step 2: the attention row belonging to the category tokens, on the patch grid.
span = category_token_span(result.token_spans, "red disk")
cat_map = extract_category_map(avg, span, result.attention.grid)

# Steps 3 and 4: normalize to [0, 1], then keep everything above tau = 0.1.
norm = normalize_map(cat_map)
mask = binarize(norm, tau=0.1)
print(f"mask covers {mask.mean():.0%} of the patch grid")

fig, axes = plt.subplots(1, 4, figsize=(13, 3.4))
axes[0].imshow(result.image)
axes[0].set_title("generated image")
axes[1].imshow(cat_map, cmap="magma")
axes[1].set_title("category attention")
axes[2].imshow(norm, cmap="magma", vmin=0, vmax=1)
axes[2].set_title("normalized")
axes[3].imshow(mask, cmap="gray", vmin=0, vmax=1)
axes[3].set_title("binary pseudo-mask")
for ax in axes:
    ax.set_xticks([])
    ax.set_yticks([])
fig.tight_layout()
fig.savefig(OUT / "pseudo_labels.png", dpi=120)
print("wrote", OUT / "pseudo_labels.png")
