"""Supervised composite loss, consistency losses and the epoch schedule.

Probability inputs are P x H x W (one image) or B x P x H x W (a batch);
channel 1 is the foreground (sclera) class.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

DICE_EPS = 1e-6
_PROB_EPS = 1e-8
_NORM_TOL = 1e-4


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 20.0
    alpha_period: int = 100
    slope_u: float = 0.02
    slope_ss: float = 0.002
    boundary_sigma: float = 3.0
    dice_eps: float = DICE_EPS
    stage2_start_epoch: int = 0
    deep_supervision: bool = True


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float
    lambda3: float
    lambda4: float
    lambda_u: float
    lambda_ss: float
    alpha: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def schedule(epoch: int, base: Optional[LossConfig] = None) -> LossWeights:
    """Loss weights for ``epoch``: dice gives way to surface loss over the
    first ``alpha_period`` epochs, unsupervised weights ramp linearly."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    base = base or LossConfig()
    alpha = epoch / base.alpha_period if epoch < base.alpha_period else 0.0
    lambda_ss = base.slope_ss * epoch if epoch >= base.stage2_start_epoch else 0.0
    return LossWeights(base.lambda1, base.lambda2, 1.0 - alpha, alpha,
                       base.slope_u * epoch, lambda_ss, alpha)


# -- distance maps -----------------------------------------------------------

def mask_boundary(gt: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-connected background neighbor.

    The image edge does not count as background.
    """
    m = np.asarray(gt).astype(bool)
    if m.all() or not m.any():
        return np.zeros_like(m)
    eroded = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1),
                                    border_value=1)
    return m & ~eroded


def boundary_weight_map(gt: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """exp(-d^2 / 2 sigma^2) with d the distance to the nearest boundary pixel,
    zero beyond 3 sigma."""
    edge = mask_boundary(gt)
    if not edge.any():
        return np.zeros(edge.shape, dtype=np.float64)
    d = ndimage.distance_transform_edt(~edge)
    w = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    w[d > 3.0 * sigma] = 0.0
    return w


def signed_distance_map(gt: np.ndarray) -> np.ndarray:
    """Negative inside the mask, positive outside, zero on the mask boundary."""
    m = np.asarray(gt).astype(bool)
    if m.all() or not m.any():
        return np.zeros(m.shape, dtype=np.float64)
    outside = ndimage.distance_transform_edt(~m)
    inside = ndimage.distance_transform_edt(m)
    return np.where(m, -(inside - 1.0), outside)


# -- loss terms ----------------------------------------------------------------

def _batched(x: torch.Tensor, dims: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == dims else x


def check_normalized(probs: torch.Tensor, tol: float = _NORM_TOL):
    sums = probs.detach().sum(dim=1)
    err = (sums - 1.0).abs().max().item() if sums.numel() else 0.0
    if not math.isfinite(err) or err > tol:
        raise ValueError(f"probabilities are not normalized over classes (max |sum-1| = {err:.3g})")


def one_hot(gt: torch.Tensor, num_classes: int) -> torch.Tensor:
    gt = gt.long()
    return torch.nn.functional.one_hot(gt, num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def weighted_cross_entropy(probs, gt, bal, lambda1=1.0, lambda2=0.0):
    """Mean over pixels of CE(p, g) * (lambda1 + lambda2 * bal)."""
    probs = _batched(probs, 3)
    gt = _batched(gt, 2)
    bal = _batched(bal, 2).to(probs.dtype)
    target = one_hot(gt, probs.shape[1]).to(probs.dtype)
    ce = -(target * torch.log(probs.clamp_min(_PROB_EPS))).sum(dim=1)
    return (ce * (lambda1 + lambda2 * bal)).mean()


def dice_loss(probs, gt, eps: float = DICE_EPS):
    """1 - 2 sum(p_f g) / (sum p_f + sum g + eps), averaged over the batch."""
    probs = _batched(probs, 3)
    gt = _batched(gt, 2).to(probs.dtype)
    pf = probs[:, 1]
    inter = (pf * gt).sum(dim=(1, 2))
    denom = pf.sum(dim=(1, 2)) + gt.sum(dim=(1, 2)) + eps
    return (1.0 - 2.0 * inter / denom).mean()


def surface_loss(probs, sdm):
    """Mean over pixels of p_f * phi."""
    probs = _batched(probs, 3)
    sdm = _batched(sdm, 2).to(probs.dtype)
    return (probs[:, 1] * sdm).mean()


def supervised_loss(probs, gt, weights: LossWeights, bal, sdm,
                    dice_eps: float = DICE_EPS) -> Tuple[torch.Tensor, Dict[str, float]]:
    """CE * (lambda1 + lambda2 * boundary) + lambda3 * dice + lambda4 * surface."""
    probs = _batched(probs, 3)
    check_normalized(probs)
    ce = weighted_cross_entropy(probs, gt, bal, weights.lambda1, weights.lambda2)
    dl = dice_loss(probs, gt, dice_eps)
    sl = surface_loss(probs, sdm)
    total = ce + weights.lambda3 * dl + weights.lambda4 * sl
    parts = {"ce_bal": float(ce.detach()), "dice": float(dl.detach()),
             "surface": float(sl.detach()), "sup": float(total.detach())}
    return total, parts


def side_loss(probs, gt, dice_eps: float = DICE_EPS):
    """Plain CE + dice used for deep supervision of side maps."""
    probs = _batched(probs, 3)
    gt_b = _batched(gt, 2)
    target = one_hot(gt_b, probs.shape[1]).to(probs.dtype)
    ce = -(target * torch.log(probs.clamp_min(_PROB_EPS))).sum(dim=1).mean()
    return ce + dice_loss(probs, gt_b, dice_eps)


def _probs_of(guessed):
    return guessed.probs if hasattr(guessed, "probs") else guessed


def consistency_loss_u(probs, guessed) -> torch.Tensor:
    """Mean squared error against the guessed label over all channels and pixels."""
    target = torch.as_tensor(_probs_of(guessed), dtype=probs.dtype)
    if tuple(target.shape) != tuple(probs.shape):
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs guessed {tuple(target.shape)}")
    return ((probs - target.detach()) ** 2).mean()


def consistency_loss_ss(probs, guessed, validity) -> torch.Tensor:
    """Mean squared error restricted to valid pixels; zero when none are valid."""
    target = torch.as_tensor(_probs_of(guessed), dtype=probs.dtype)
    if tuple(target.shape) != tuple(probs.shape):
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs guessed {tuple(target.shape)}")
    v = torch.as_tensor(validity, dtype=probs.dtype)
    # validity is per pixel: H x W or B x H x W; broadcast over classes
    v = v.unsqueeze(-3)
    n_valid = v.expand_as(probs).sum()
    if n_valid.item() == 0:
        return probs.sum() * 0.0
    return (((probs - target.detach()) ** 2) * v).sum() / n_valid


def total_loss(l_s, l_u, l_ss, weights: LossWeights):
    """L_s + lambda_u * L_u + lambda_ss * L_ss."""
    for name, val in (("L_s", l_s), ("L_u", l_u), ("L_ss", l_ss)):
        v = float(val.detach()) if torch.is_tensor(val) else float(val)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss component {name} = {v}")
    return l_s + weights.lambda_u * l_u + weights.lambda_ss * l_ss
