"""
Photometric augmentation on a synthetic eye
===========================================

CLAHE with each of the paired clip/grid settings, then gamma correction
and a contrast/brightness jitter, applied to one toy eye image.
"""

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from sclera_ssl.augment import CLAHE_CLIPS, CLAHE_GRIDS, GAMMAS, apply_clahe, apply_gamma
from sclera_ssl.data import toy_eye

# one 128x128 eye; the mask is the sclera (eye opening minus iris)
rng = np.random.default_rng(3)
img, mask = toy_eye(rng, (128, 128))
print("foreground fraction:", mask.mean().round(3))

fig, axes = plt.subplots(2, 5, figsize=(13, 5.5))
axes = axes.ravel()
axes[0].imshow(img, cmap="gray", vmin=0, vmax=1)
axes[0].set_title("input")
axes[1].imshow(mask, cmap="gray")
axes[1].set_title("sclera mask")

# the clip and grid lists are drawn with one shared index
for ax, clip, grid in zip(axes[2:8], CLAHE_CLIPS, CLAHE_GRIDS):
    ax.imshow(apply_clahe(img, clip, grid), cmap="gray", vmin=0, vmax=1)
    ax.set_title(f"CLAHE clip={clip} grid={grid}", fontsize=9)

# gamma below one brightens, above one darkens
axes[8].imshow(apply_gamma(img, GAMMAS[0]), cmap="gray", vmin=0, vmax=1)
axes[8].set_title(f"gamma {GAMMAS[0]}")
axes[9].imshow(apply_gamma(img, GAMMAS[-1]), cmap="gray", vmin=0, vmax=1)
axes[9].set_title(f"gamma {GAMMAS[-1]}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("photometric_augmentation.png", dpi=90)
print("wrote photometric_augmentation.png")
