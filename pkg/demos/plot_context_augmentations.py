"""
Context augmentations on the synthetic squares
==============================================

Apply invert, vflip and equalize to a few training images, then measure
how far each one pushes images away from the training data and whether it
keeps their neighbourhood structure.
"""

# %%
import matplotlib.pyplot as plt
import numpy as np

from con2 import make_synthetic_split
from con2.imageops import check_alignment, check_distinctiveness, equalize, invert, vflip

split = make_synthetic_split()
sample = split.train[:4]

# %%
# One row per augmentation.
contexts = {"original": lambda x: x, "invert": invert, "vflip": vflip, "equalize": equalize}
fig, axes = plt.subplots(len(contexts), len(sample), figsize=(6, 6))
for row, (name, t_c) in zip(axes, contexts.items()):
    for ax, img in zip(row, sample):
        ax.imshow(t_c(img)[..., 0], cmap="gray", vmin=0, vmax=1)
        ax.set_xticks([])
        ax.set_yticks([])
    row[0].set_ylabel(name)
plt.tight_layout()

# %%
# Distinctiveness is the share of images whose nearest neighbours cross
# contexts, so 0 is best. Alignment 1.0 means pairwise distances keep their
# ordering after the augmentation.
for name in ("invert", "vflip", "equalize"):
    dist = check_distinctiveness(split.train[:60], name)
    align = check_alignment(split.train[:60], name)
    print(f"{name:9s} distinctiveness={dist.distinctiveness:.3f} alignment={align.alignment:.3f}")

# %%
# Both involutions are exact on loaded data.
assert all(np.array_equal(invert(invert(x)), x) for x in split.train)
assert all(np.array_equal(vflip(vflip(x)), x) for x in split.train)
