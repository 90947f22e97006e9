"""Invertible rigid transforms (rotation about the image center plus an
integer translation) with validity tracking for pixels that leave the frame.

Fields are warped by inverse mapping: each output pixel samples the source at
the pre-image of its own location. An output pixel is valid when every
source tap it reads lies inside the frame and is itself valid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

_VALID_EPS = 1e-4


@dataclass(frozen=True)
class SpatialTransform:
    rotate_deg: float = 0.0
    translate_px: Tuple[int, int] = (0, 0)  # (dx, dy); +dx moves content right
    applied_rotation: bool = False
    applied_translation: bool = False
    inverted: bool = False  # True: undo translation first, then rotation

    @property
    def is_identity(self) -> bool:
        return self.rotate_deg == 0.0 and tuple(self.translate_px) == (0, 0)

    def inverse(self) -> "SpatialTransform":
        dx, dy = self.translate_px
        return SpatialTransform(-self.rotate_deg, (-dx, -dy), self.applied_rotation,
                                self.applied_translation, not self.inverted)

    def matrix(self, height: int, width: int) -> np.ndarray:
        """3x3 homogeneous map from source (x, y) to destination (x, y)."""
        th = math.radians(self.rotate_deg)
        c, s = math.cos(th), math.sin(th)
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        rot = np.array([[c, -s, cx - c * cx + s * cy],
                        [s, c, cy - s * cx - c * cy],
                        [0.0, 0.0, 1.0]])
        dx, dy = self.translate_px
        shift = np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
        return rot @ shift if self.inverted else shift @ rot


IDENTITY = SpatialTransform()


def inverse(t: SpatialTransform) -> SpatialTransform:
    return t.inverse()


def sample_transform(rng: np.random.Generator, p1: float = 0.5, p2: float = 0.5,
                     max_rotate_deg: float = 5.0, max_translate_px: int = 20) -> SpatialTransform:
    """Rotation with probability ``p1``, translation with probability ``p2``."""
    if not (0.0 <= p1 <= 1.0 and 0.0 <= p2 <= 1.0):
        raise ValueError(f"probabilities must lie in [0, 1], got p1={p1}, p2={p2}")
    use_rot = bool(rng.random() < p1)
    use_shift = bool(rng.random() < p2)
    angle = float(rng.uniform(-max_rotate_deg, max_rotate_deg)) if use_rot else 0.0
    if use_shift:
        dx, dy = (int(v) for v in rng.integers(-max_translate_px, max_translate_px + 1, size=2))
    else:
        dx, dy = 0, 0
    return SpatialTransform(angle, (dx, dy), use_rot, use_shift)


def _shift(field: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    out = torch.zeros_like(field)
    H, W = field.shape[-2:]
    if abs(dx) >= W or abs(dy) >= H:
        return out
    ys = slice(max(dy, 0), H + min(dy, 0))
    xs = slice(max(dx, 0), W + min(dx, 0))
    ys_src = slice(max(-dy, 0), H + min(-dy, 0))
    xs_src = slice(max(-dx, 0), W + min(-dx, 0))
    out[..., ys, xs] = field[..., ys_src, xs_src]
    return out


def _sample_grid(t: SpatialTransform, H: int, W: int, dtype, device):
    """Normalized grid of source locations plus the in-frame indicator."""
    inv = np.linalg.inv(t.matrix(H, W))
    ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float64),
                            torch.arange(W, dtype=torch.float64), indexing="ij")
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    inside = ((sx >= -_VALID_EPS) & (sx <= W - 1 + _VALID_EPS)
              & (sy >= -_VALID_EPS) & (sy <= H - 1 + _VALID_EPS))
    gx = 2.0 * sx / max(W - 1, 1) - 1.0
    gy = 2.0 * sy / max(H - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1).to(dtype=dtype, device=device)
    return grid, inside.to(device)


def warp_tensor(t: SpatialTransform, field: torch.Tensor, validity: Optional[torch.Tensor] = None,
                mode: str = "bilinear") -> Tuple[torch.Tensor, torch.Tensor]:
    """Warp a B x P x H x W tensor (differentiable in ``field``).

    ``validity`` (B x H x W or H x W, optional) marks trustworthy input pixels.
    Returns (warped field, validity as float 0/1 of shape B x H x W).
    """
    if field.dim() != 4:
        raise ValueError(f"expected B x P x H x W, got shape {tuple(field.shape)}")
    B, _, H, W = field.shape
    if validity is None:
        validity = torch.ones(B, H, W, dtype=field.dtype, device=field.device)
    else:
        validity = validity.to(field.dtype)
        if validity.dim() == 2:
            validity = validity.expand(B, H, W)
    if t.is_identity:
        return field.clone(), validity.clone()
    if t.rotate_deg == 0.0:
        dx, dy = t.translate_px
        out = _shift(field, int(dx), int(dy))
        valid = _shift(validity[:, None], int(dx), int(dy))[:, 0]
        return out, valid
    grid, inside = _sample_grid(t, H, W, field.dtype, field.device)
    grid = grid.expand(B, H, W, 2)
    out = F.grid_sample(field, grid, mode=mode, padding_mode="zeros", align_corners=True)
    # a tap from an invalid pixel pulls the warped validity below one
    vwarp = F.grid_sample(validity[:, None], grid, mode=mode, padding_mode="zeros",
                          align_corners=True)[:, 0]
    valid = ((vwarp >= 1.0 - 1e-6) & inside).to(field.dtype)
    return out * valid[:, None], valid


def _as_batch(field: np.ndarray):
    arr = np.asarray(field)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))[None]), squeeze


def apply(t: SpatialTransform, field: np.ndarray, validity: Optional[np.ndarray] = None,
          binary: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Warp an H x W x P (or H x W) array; invalid pixels are filled with 0."""
    ten, squeeze = _as_batch(np.asarray(field, dtype=np.float64))
    vt = None if validity is None else torch.as_tensor(np.asarray(validity, dtype=np.float64))
    out, valid = warp_tensor(t, ten, vt, mode="nearest" if binary else "bilinear")
    out = out[0].numpy().transpose(1, 2, 0)
    if squeeze:
        out = out[..., 0]
    if binary:
        out = (out > 0.5).astype(np.asarray(field).dtype)
    return out, valid[0].numpy().astype(np.uint8)


def apply_inverse(t: SpatialTransform, field: np.ndarray, validity: Optional[np.ndarray] = None,
                  binary: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    return apply(t.inverse(), field, validity, binary)


def round_trip_validity(t: SpatialTransform, height: int, width: int) -> np.ndarray:
    """Pixels that survive apply followed by apply_inverse."""
    ones = np.ones((height, width))
    _, v1 = apply(t, ones)
    _, v2 = apply_inverse(t, ones, v1)
    return v2
