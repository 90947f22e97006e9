"""Confusion counts, IoU / recall / precision / F1, dataset evaluation and
TP/FP/FN overlays."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import torch

# overlay tints (RGB in [0, 1]): true positive, false positive, false negative
TP_COLOR = (0.0, 0.0, 1.0)
FP_COLOR = (0.0, 1.0, 0.0)
FN_COLOR = (1.0, 0.0, 0.0)

METRIC_NAMES = ("iou", "recall", "precision", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def compute_metrics(c: ConfusionCounts) -> Dict[str, float]:
    """IoU, recall, precision and F1.

    Empty denominators score 1 when prediction and ground truth agree on
    being empty and 0 otherwise.
    """
    gt_pos = c.tp + c.fn
    pred_pos = c.tp + c.fp
    union = c.tp + c.fp + c.fn
    iou = c.tp / union if union else 1.0
    recall = c.tp / gt_pos if gt_pos else (1.0 if pred_pos == 0 else 0.0)
    precision = c.tp / pred_pos if pred_pos else (1.0 if gt_pos == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"iou": iou, "recall": recall, "precision": precision, "f1": f1}


@dataclass
class MetricsReport:
    per_image: List[Dict] = field(default_factory=list)
    mean_iou: float = 0.0
    mean_recall: float = 0.0
    mean_precision: float = 0.0
    mean_f1: float = 0.0
    micro: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, ids: Sequence[str], counts: Sequence[ConfusionCounts]) -> "MetricsReport":
        rows = []
        for sid, c in zip(ids, counts):
            rows.append({"id": sid, **compute_metrics(c), "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn})
        means = {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in METRIC_NAMES}
        pooled = sum(counts, ConfusionCounts(0, 0, 0, 0))
        return cls(rows, means["iou"], means["recall"], means["precision"], means["f1"],
                   compute_metrics(pooled))

    def means(self) -> Dict[str, float]:
        return {"iou": self.mean_iou, "recall": self.mean_recall,
                "precision": self.mean_precision, "f1": self.mean_f1}

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))

    def table(self, label: str = "", x_l="-") -> str:
        """Plain-text row in the mIoU / Recall / Precision / F1 percent layout."""
        head = f"{'X_l':>5}  {'Segmentation Network':<22}{'mIoU %':>9}{'Recall %':>10}{'Precision %':>13}{'F1 %':>8}"
        row = (f"{str(x_l):>5}  {label:<22}{100 * self.mean_iou:9.2f}{100 * self.mean_recall:10.2f}"
               f"{100 * self.mean_precision:13.2f}{100 * self.mean_f1:8.2f}")
        micro = ""
        if self.micro:
            micro = "\npooled counts: " + "  ".join(f"{k}={100 * v:.2f}"
                                                     for k, v in self.micro.items())
        return f"{head}\n{row}{micro}\n"


@torch.no_grad()
def predict_probs(model, images: Sequence[np.ndarray], batch_size: int = 8) -> np.ndarray:
    """Foreground probability maps (N x H x W) from the fused output."""
    from .network import to_batch

    if hasattr(model, "eval"):
        model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        res = model(to_batch(images[i:i + batch_size]))
        out.append(res.fused_probs[:, 1].double().cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def predict_masks(model, images, threshold: float = 0.5, batch_size: int = 8) -> np.ndarray:
    return (predict_probs(model, images, batch_size) > threshold).astype(np.uint8)


def evaluate(model, dataset, threshold: float = 0.5, batch_size: int = 8,
             return_masks: bool = False):
    """Per-image and mean metrics of ``model`` on labeled samples."""
    for s in dataset:
        if not s.labeled:
            raise ValueError(f"cannot evaluate on unlabeled sample {s.id}")
    masks = predict_masks(model, [s.image for s in dataset], threshold, batch_size)
    counts = [confusion_counts(m, s.mask) for m, s in zip(masks, dataset)]
    report = MetricsReport.from_counts([s.id for s in dataset], counts)
    return (report, masks) if return_masks else report


def render_overlay(pred, gt, image, alpha: float = 0.5) -> np.ndarray:
    """Tint TP blue, FP green, FN red; true negatives keep the source pixels."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if pred.shape != gt.shape or pred.shape != img.shape[:2]:
        raise ValueError("pred, gt and image must share spatial dims")
    out = img.copy()
    for sel, color in ((pred & gt, TP_COLOR), (pred & ~gt, FP_COLOR), (~pred & gt, FN_COLOR)):
        out[sel] = (1.0 - alpha) * img[sel] + alpha * np.asarray(color)
    return out
