"""
Tuning a concept embedding on synthetic pairs
=============================================

The segmenter stays frozen; only a 512-d conditioning vector moves. Training
data is entirely synthetic: positives of the target category with their
attention-derived masks, hard negatives of a lookalike with all-zero masks.
Checkpoint selection prefers flat minima: among the lowest-sharpness fifth of
epochs, take the best validation loss.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from finecount.specializer import BilinearToySegmenter, TuningConfig, tune
from finecount.synthesis import MockShapesGenerator, synthesize_dataset
from finecount.taxonomy import CategorySpec, NegativeSource, expand_prompts

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# "red disk" with "yellow diamond" as a static hard negative. The two share
# a color channel in the toy feature space, so positives alone cannot
# separate them; that is exactly what the negatives are for.
spec = CategorySpec(
    name="red disk",
    parent="shape",
    negatives=["yellow diamond"],
    negative_source=NegativeSource.STATIC,
)

generator = MockShapesGenerator()
bundle = expand_prompts(spec, 20, seed=0)
pairs = synthesize_dataset(spec, bundle, generator, n_pos=20, n_neg_total=20, seed=0)
print(f"synthesized {len(pairs)} pairs")

segmenter = BilinearToySegmenter(seed=0)
concept = tune(spec, pairs, segmenter,
               TuningConfig(epochs=50, seed=0, batch_size=8))

sel = concept.history[concept.selected_epoch]
print(f"selected epoch {sel.epoch}: val loss {sel.val_loss:.4f}, "
      f"sharpness {sel.sharpness:.5f}")
print(f"train loss {concept.history[0].train_loss:.3f} -> "
      f"{concept.history[-1].train_loss:.3f}")

epochs = [r.epoch for r in concept.history]
fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
ax1.plot(epochs, [r.train_loss for r in concept.history], label="train")
ax1.plot(epochs, [r.val_loss for r in concept.history], label="val")
ax1.axvline(concept.selected_epoch, color="k", ls="--", lw=1, label="selected")
ax1.set_ylabel("concept loss")
ax1.legend()
ax2.plot(epochs, [r.sharpness for r in concept.history], color="tab:red")
ax2.axvline(concept.selected_epoch, color="k", ls="--", lw=1)
ax2.set_ylabel("sharpness")
ax2.set_xlabel("epoch")
fig.tight_layout()
fig.savefig(OUT / "tuning_history.png", dpi=120)
print("wrote", OUT / "tuning_history.png")
