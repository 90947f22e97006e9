"""Photometric augmentation: CLAHE, gamma, contrast/brightness jitter."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

NBINS = 256

CLAHE_CLIPS = (1.0, 1.2, 1.5, 1.5, 1.5, 2.0)
CLAHE_GRIDS = (2, 4, 8, 8, 8, 16)
GAMMAS = tuple(round(0.80 + 0.05 * i, 2) for i in range(9))

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentParams:
    clahe_clip: float = 1.0
    clahe_grid: int = 2
    gamma: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0
    apply_clahe: bool = True


@dataclass
class AugmentConfig:
    """Sampling distribution for photometric augmentation."""
    clips: Sequence[float] = CLAHE_CLIPS
    grids: Sequence[int] = CLAHE_GRIDS
    gammas: Sequence[float] = GAMMAS
    contrast_range: Tuple[float, float] = (0.9, 1.1)
    brightness_range: Tuple[float, float] = (-0.05, 0.05)
    clahe_prob: float = 1.0
    order: Tuple[str, ...] = ("clahe", "gamma", "contrast")

    def __post_init__(self):
        if len(self.clips) != len(self.grids):
            raise ValueError("clip and grid lists must pair up one-to-one")
        unknown = set(self.order) - {"clahe", "gamma", "contrast"}
        if unknown:
            raise ValueError(f"unknown augmentation ops in order: {sorted(unknown)}")


def _to_bins(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * (NBINS - 1)), 0, NBINS - 1).astype(np.int64)


def clip_histogram(hist: np.ndarray, limit: int) -> np.ndarray:
    """Clip integer bin counts at ``limit`` and spread the excess over all bins.

    The total count is preserved exactly. Leftover counts that do not divide
    evenly go one per bin at a regular stride.
    """
    hist = np.asarray(hist, dtype=np.int64)
    n = hist.shape[-1]
    excess = np.maximum(hist - limit, 0).sum(axis=-1, keepdims=True)
    out = np.minimum(hist, limit) + excess // n
    residual = (excess % n)[..., 0]
    flat_out = out.reshape(-1, n)
    for idx, r in enumerate(residual.reshape(-1)):
        if r:
            step = max(n // int(r), 1)
            flat_out[idx, np.arange(0, n, step)[: int(r)]] += 1
    return flat_out.reshape(out.shape)


def clip_limit_count(clip: float, tile_pixels: int) -> int:
    return max(int(clip * tile_pixels / NBINS), 1)


def tile_histograms(bins: np.ndarray, grid: int):
    """Return (hist[grid, grid, NBINS], tile_h, tile_w) for a padded bin image."""
    H, W = bins.shape
    th, tw = H // grid, W // grid
    tiles = bins.reshape(grid, th, grid, tw).transpose(0, 2, 1, 3).reshape(grid, grid, -1)
    offsets = (np.arange(grid * grid) * NBINS).reshape(grid, grid, 1)
    hist = np.bincount((tiles + offsets).ravel(), minlength=grid * grid * NBINS)
    return hist.reshape(grid, grid, NBINS), th, tw


def _pad_to_grid(bins: np.ndarray, grid: int) -> np.ndarray:
    H, W = bins.shape
    ph = (-H) % grid
    pw = (-W) % grid
    if ph or pw:
        bins = np.pad(bins, ((0, ph), (0, pw)), mode="reflect" if min(H, W) > 1 else "edge")
    return bins


def clahe_luts(image: np.ndarray, clip: float, grid: int):
    """Per-tile mapping tables (grid x grid x NBINS, values in [0, 1])."""
    bins = _pad_to_grid(_to_bins(image), grid)
    hist, th, tw = tile_histograms(bins, grid)
    npix = th * tw
    clipped = clip_histogram(hist, clip_limit_count(clip, npix))
    return np.cumsum(clipped, axis=-1) / float(npix), th, tw


def _interp_weights(n: int, tile: int, grid: int):
    pos = (np.arange(n) + 0.5) / tile - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    hi = np.clip(lo + 1, 0, grid - 1)
    lo = np.clip(lo, 0, grid - 1)
    return lo, hi, frac


def apply_clahe(image: np.ndarray, clip: float, grid: int) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of an H x W image in [0, 1].

    Each pixel blends the mappings of the four nearest tile centers
    bilinearly; pixels beyond the outer centers use the nearest ones.
    RGB input (H x W x 3) is equalized on luma and rescaled so chroma
    ratios are kept.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[2] == 1:
            return apply_clahe(image[..., 0], clip, grid)[..., None]
        luma = image @ _LUMA
        new = apply_clahe(luma, clip, grid)
        ratio = np.divide(new, luma, out=np.zeros_like(luma), where=luma > 1e-8)
        out = image * ratio[..., None]
        out[luma <= 1e-8] = new[luma <= 1e-8, None]
        return np.clip(out, 0.0, 1.0)
    if clip < 1.0:
        raise ValueError(f"clip limit must be >= 1, got {clip}")
    H, W = image.shape
    if grid < 1 or grid > min(H, W):
        raise ValueError(f"grid {grid} does not fit image {H}x{W}")
    luts, th, tw = clahe_luts(image, clip, grid)
    bins = _to_bins(image)
    y0, y1, fy = _interp_weights(H, th, grid)
    x0, x1, fx = _interp_weights(W, tw, grid)
    fy = fy[:, None]
    fx = fx[None, :]
    def lut(ty, tx):
        return luts[ty[:, None], tx[None, :], bins]
    top = lut(y0, x0) * (1 - fx) + lut(y0, x1) * fx
    bot = lut(y1, x0) * (1 - fx) + lut(y1, x1) * fx
    return np.clip(top * (1 - fy) + bot * fy, 0.0, 1.0)


def apply_gamma(image: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    image = np.asarray(image, dtype=np.float64)
    if gamma == 1.0:
        return image.copy()
    return np.power(np.clip(image, 0.0, 1.0), gamma)


def adjust_contrast_brightness(image: np.ndarray, contrast: float, brightness: float) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.clip(contrast * (image - 0.5) + 0.5 + brightness, 0.0, 1.0)


def sample_domain_augmentation(rng: np.random.Generator, mode: str = "unlabeled",
                               config: Optional[AugmentConfig] = None) -> AugmentParams:
    """Draw photometric parameters.

    ``labeled`` mode only varies CLAHE; ``unlabeled`` also draws gamma and
    contrast/brightness jitter. The CLAHE clip and grid share one index.
    """
    config = config or AugmentConfig()
    if mode not in ("labeled", "unlabeled"):
        raise ValueError(f"mode must be 'labeled' or 'unlabeled', got {mode!r}")
    idx = int(rng.integers(len(config.clips)))
    use_clahe = bool(rng.random() < config.clahe_prob)
    params = AugmentParams(clahe_clip=float(config.clips[idx]), clahe_grid=int(config.grids[idx]),
                           apply_clahe=use_clahe)
    if mode == "labeled":
        return params
    gamma = float(config.gammas[int(rng.integers(len(config.gammas)))])
    contrast = float(rng.uniform(*config.contrast_range))
    brightness = float(rng.uniform(*config.brightness_range))
    return replace(params, gamma=gamma, contrast=contrast, brightness=brightness)


def apply_params(image: np.ndarray, params: AugmentParams,
                 order: Sequence[str] = ("clahe", "gamma", "contrast")) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    for op in order:
        if op == "clahe" and params.apply_clahe:
            grid = min(params.clahe_grid, out.shape[0], out.shape[1])
            out = apply_clahe(out, params.clahe_clip, grid)
        elif op == "gamma" and params.gamma != 1.0:
            out = apply_gamma(out, params.gamma)
        elif op == "contrast" and (params.contrast != 1.0 or params.brightness != 0.0):
            out = adjust_contrast_brightness(out, params.contrast, params.brightness)
    return out


def augment_k(sample, k: int, rng: np.random.Generator, mode: str = "unlabeled",
              config: Optional[AugmentConfig] = None) -> List[np.ndarray]:
    """Return ``k`` independently augmented copies of ``sample``'s image.

    ``sample`` may be an ImageSample or a bare image array. Masks are left
    alone: callers pair the copies with the original mask.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    config = config or AugmentConfig()
    image = getattr(sample, "image", sample)
    out = []
    for _ in range(k):
        params = sample_domain_augmentation(rng, mode, config)
        out.append(apply_params(image, params, config.order))
    return out
