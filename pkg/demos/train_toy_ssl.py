"""
Semi-supervised training on toy eyes
====================================

Trains the network on 8 labeled and 64 unlabeled synthetic eyes, then
compares label guesses from photometric copies (SSLD) with guesses from
transformed-and-restored copies (SSL-SS) on one unlabeled image.

Takes about 15 minutes on a single CPU core at the default 60 epochs;
pass a smaller epoch count as the first argument for a quick look.
"""

import sys

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from sclera_ssl.data import ToyDatasetSpec, generate_toy_dataset
from sclera_ssl.metrics import evaluate, render_overlay
from sclera_ssl.trainer import (TrainConfig, guess_labels_sslss, guess_labels_ssld,
                                model_from_checkpoint, train)

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
data = generate_toy_dataset(ToyDatasetSpec(8, 64, 8, 8, (64, 64), seed=7))
cfg = TrainConfig(epochs=epochs, input_size=(64, 64), base_channels=8, k=2, seed=0)

ckpt, history = train(cfg, data)
for r in history.records[:: max(1, epochs // 10)]:
    print(f"epoch {r['epoch']:3d}  loss {r['total']:.4f}  lambda_u {r['lambda_u']:.2f}"
          f"  val mIoU {r['val_miou']:.4f}")

model = model_from_checkpoint(ckpt, "best")
report = evaluate(model, data.test)
print(report.table("Proposed Method", len(data.train_labeled)))

# label guessing on one unlabeled image, k = 4 copies
x_u = data.train_unlabeled[0].image
rng = np.random.default_rng(1)
g_ssld, copies = guess_labels_ssld(model, x_u, 4, rng)
g_ss, moved, transforms = guess_labels_sslss(model, x_u, 4, rng, copies=copies)
print("transforms:", [(round(t.rotate_deg, 2), t.translate_px) for t in transforms])

sample = data.test[0]
_, masks = evaluate(model, [sample], return_masks=True)
fig, axes = plt.subplots(1, 4, figsize=(12, 3.4))
axes[0].imshow(x_u[..., 0], cmap="gray")
axes[0].set_title("unlabeled image")
axes[1].imshow(g_ssld.probs[1], vmin=0, vmax=1)
axes[1].set_title("SSLD guess")
axes[2].imshow(g_ss.probs[1] * g_ss.validity, vmin=0, vmax=1)
axes[2].set_title("SSL-SS guess (valid part)")
axes[3].imshow(render_overlay(masks[0], sample.mask, sample.image))
axes[3].set_title("test overlay TP/FP/FN")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig("toy_ssl.png", dpi=90)
