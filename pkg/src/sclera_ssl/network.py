"""Improved U2Net: seven RSU encoder stages, six decoder stages, seven side
outputs and a fused head.

Channel widths (``b = base_channels``)::

    stage   block    in      mid    out
    En_1    RSU-8    C       b/2    b
    En_2    RSU-7    b       b/2    2b
    En_3    RSU-6    2b      b      4b
    En_4    RSU-5    4b      2b     8b
    En_5    RSU-4    8b      4b     8b
    En_6    RSU-4F   8b      4b     8b
    En_7    RSU-4F   8b      4b     8b
    De_6    RSU-4F   16b     4b     8b
    De_5    RSU-4    16b     4b     8b
    De_4    RSU-5    16b     2b     4b
    De_3    RSU-6    8b      b      2b
    De_2    RSU-7    4b      b/2    b
    De_1    RSU-8    2b      b/4    b

With ``b = 64`` the widths coincide with the published U2Net table.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

Height = Union[int, str]  # an integer RSU height L, or "F" for RSU-4F

_ENC_OUT = (1, 2, 4, 8, 8, 8, 8)
_ENC_MID = (0.5, 0.5, 1, 2, 4, 4, 4)


@dataclass(frozen=True)
class RsuConfig:
    height: int
    in_ch: int
    mid_ch: int
    out_ch: int
    dilated: bool = False

    def __post_init__(self):
        if self.height < 2:
            raise ValueError(f"RSU height must be >= 2, got {self.height}")


@dataclass(frozen=True)
class U2NetPlusConfig:
    encoder_heights: Tuple[Height, ...] = (8, 7, 6, 5, 4, "F", "F")
    num_classes: int = 2
    base_channels: int = 64
    in_channels: int = 3
    input_size: Tuple[int, int] = (256, 256)

    @property
    def num_stages(self) -> int:
        return len(self.encoder_heights)

    @property
    def decoder_heights(self) -> Tuple[Height, ...]:
        # De_i mirrors En_i; listed De_{n-1} ... De_1
        return tuple(reversed(self.encoder_heights[:-1]))

    def validate(self):
        n = self.num_stages
        if not 2 <= n <= len(_ENC_OUT):
            raise ValueError(f"encoder must have 2..{len(_ENC_OUT)} stages, got {n}")
        factor = 2 ** (n - 1)
        h, w = self.input_size
        if h % factor or w % factor:
            raise ValueError(
                f"input size {self.input_size} not divisible by {factor} "
                f"({n}-stage downsampling path)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (softmax output)")
        for hgt in self.encoder_heights:
            if hgt != "F" and (not isinstance(hgt, int) or hgt < 2):
                raise ValueError(f"bad RSU height {hgt!r}")


@dataclass
class NetworkOutputs:
    """Side and fused maps, each B x P x H x W at input resolution.

    ``side_probs[i]`` is S_side^(i+1); the last one comes from the deepest
    encoder stage.
    """
    side_logits: List[torch.Tensor]
    fused_logits: torch.Tensor
    side_probs: List[torch.Tensor] = field(default_factory=list)
    fused_probs: torch.Tensor = None

    def __post_init__(self):
        if not self.side_probs:
            self.side_probs = [torch.softmax(s, dim=1) for s in self.side_logits]
        if self.fused_probs is None:
            self.fused_probs = torch.softmax(self.fused_logits, dim=1)

    @classmethod
    def from_probs(cls, fused_probs: torch.Tensor, side_probs=None) -> "NetworkOutputs":
        """Wrap probability maps produced by a non-network callable (stubs, baselines)."""
        logits = torch.log(fused_probs.clamp_min(1e-12))
        side_probs = list(side_probs) if side_probs is not None else [fused_probs]
        side_logits = [torch.log(p.clamp_min(1e-12)) for p in side_probs]
        return cls(side_logits, logits, side_probs, fused_probs)


class REBNCONV(nn.Module):
    def __init__(self, in_ch, out_ch, dirate=1):
        super().__init__()
        # bias is redundant in front of batch norm and would receive no gradient
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=dirate, dilation=dirate, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


def _upsample_like(src, tar):
    return F.interpolate(src, size=tar.shape[2:], mode="bilinear", align_corners=False)


class RSU(nn.Module):
    """Residual U-block of height L: L-2 poolings and a dilated bottom conv."""

    def __init__(self, cfg: RsuConfig):
        super().__init__()
        L = cfg.height
        self.cfg = cfg
        self.conv_in = REBNCONV(cfg.in_ch, cfg.out_ch)
        self.enc = nn.ModuleList(
            [REBNCONV(cfg.out_ch, cfg.mid_ch)]
            + [REBNCONV(cfg.mid_ch, cfg.mid_ch) for _ in range(L - 2)])
        self.bottom = REBNCONV(cfg.mid_ch, cfg.mid_ch, dirate=2)
        self.dec = nn.ModuleList(
            [REBNCONV(2 * cfg.mid_ch, cfg.mid_ch) for _ in range(L - 2)]
            + [REBNCONV(2 * cfg.mid_ch, cfg.out_ch)])
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)

    def forward(self, x):
        hxin = self.conv_in(x)
        feats = []
        hx = hxin
        for i, layer in enumerate(self.enc):
            hx = layer(hx)
            feats.append(hx)
            if i < len(self.enc) - 1:
                hx = self.pool(hx)
        hx = self.bottom(hx)
        for layer, skip in zip(self.dec, reversed(feats)):
            if hx.shape[2:] != skip.shape[2:]:
                hx = _upsample_like(hx, skip)
            hx = layer(torch.cat([hx, skip], dim=1))
        return hx + hxin


class RSU4F(nn.Module):
    """RSU-4 with dilations 1, 2, 4, 8 in place of pooling."""

    def __init__(self, cfg: RsuConfig):
        super().__init__()
        self.cfg = cfg
        self.conv_in = REBNCONV(cfg.in_ch, cfg.out_ch)
        self.e1 = REBNCONV(cfg.out_ch, cfg.mid_ch, 1)
        self.e2 = REBNCONV(cfg.mid_ch, cfg.mid_ch, 2)
        self.e3 = REBNCONV(cfg.mid_ch, cfg.mid_ch, 4)
        self.e4 = REBNCONV(cfg.mid_ch, cfg.mid_ch, 8)
        self.d3 = REBNCONV(2 * cfg.mid_ch, cfg.mid_ch, 4)
        self.d2 = REBNCONV(2 * cfg.mid_ch, cfg.mid_ch, 2)
        self.d1 = REBNCONV(2 * cfg.mid_ch, cfg.out_ch, 1)

    def forward(self, x):
        hxin = self.conv_in(x)
        h1 = self.e1(hxin)
        h2 = self.e2(h1)
        h3 = self.e3(h2)
        h4 = self.e4(h3)
        d3 = self.d3(torch.cat([h4, h3], 1))
        d2 = self.d2(torch.cat([d3, h2], 1))
        d1 = self.d1(torch.cat([d2, h1], 1))
        return d1 + hxin


def make_rsu(height: Height, in_ch: int, mid_ch: int, out_ch: int) -> nn.Module:
    if height == "F":
        return RSU4F(RsuConfig(4, in_ch, mid_ch, out_ch, dilated=True))
    return RSU(RsuConfig(int(height), in_ch, mid_ch, out_ch))


def stage_channels(config: U2NetPlusConfig):
    """Return (encoder [(in, mid, out)], decoder [(in, mid, out)] for De_1..De_{n-1})."""
    b = config.base_channels
    n = config.num_stages
    enc_out = [max(1, int(b * m)) for m in _ENC_OUT[:n]]
    enc_mid = [max(1, int(b * m)) for m in _ENC_MID[:n]]
    enc = []
    prev = config.in_channels
    for i in range(n):
        enc.append((prev, enc_mid[i], enc_out[i]))
        prev = enc_out[i]
    dec_out = [enc_out[0]] + enc_out[: n - 2]  # De_1 .. De_{n-1}
    dec = []
    below = enc_out[n - 1]
    dec_rev = []
    for i in range(n - 1, 0, -1):  # De_{n-1} down to De_1
        in_ch = below + enc_out[i - 1]
        out_ch = dec_out[i - 1]
        mid = max(1, out_ch // 4) if i == 1 else max(1, out_ch // 2)
        dec_rev.append((in_ch, mid, out_ch))
        below = out_ch
    dec = list(reversed(dec_rev))
    return enc, dec


class U2NetPlus(nn.Module):
    def __init__(self, config: U2NetPlusConfig):
        super().__init__()
        config.validate()
        self.config = config
        n = config.num_stages
        P = config.num_classes
        enc_ch, dec_ch = stage_channels(config)
        heights = config.encoder_heights
        self.encoders = nn.ModuleList(
            [make_rsu(heights[i], *enc_ch[i]) for i in range(n)])
        self.decoders = nn.ModuleList(  # index i -> De_{i+1}
            [make_rsu(heights[i], *dec_ch[i]) for i in range(n - 1)])
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)
        # S_side^(1..n-1) from De_1..De_{n-1}, S_side^(n) from En_n
        side_in = [c[2] for c in dec_ch] + [enc_ch[-1][2]]
        self.side_heads = nn.ModuleList([nn.Conv2d(c, P, 3, padding=1) for c in side_in])
        self.fuse = nn.Conv2d(n * P, P, 1)

    def forward(self, x: torch.Tensor) -> NetworkOutputs:
        expect = (self.config.in_channels, *self.config.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expect:
            raise ValueError(f"expected input B x {expect[0]} x {expect[1]} x {expect[2]}, "
                             f"got {tuple(x.shape)}")
        enc_feats = []
        hx = x
        for i, stage in enumerate(self.encoders):
            if i > 0:
                hx = self.pool(hx)
            hx = stage(hx)
            enc_feats.append(hx)
        dec_feats = [None] * len(self.decoders)
        below = enc_feats[-1]
        for i in range(len(self.decoders) - 1, -1, -1):
            skip = enc_feats[i]
            up = _upsample_like(below, skip)
            below = self.decoders[i](torch.cat([up, skip], dim=1))
            dec_feats[i] = below
        side_logits = []
        for head, feat in zip(self.side_heads, dec_feats + [enc_feats[-1]]):
            s = head(feat)
            if s.shape[2:] != x.shape[2:]:
                s = _upsample_like(s, x)
            side_logits.append(s)
        fused = self.fuse(torch.cat(side_logits, dim=1))
        return NetworkOutputs(side_logits, fused)


def build_model(config: U2NetPlusConfig) -> U2NetPlus:
    return U2NetPlus(config)


def forward(model, batch: torch.Tensor) -> NetworkOutputs:
    """Run ``model`` on a B x C x H x W batch and return softmax maps."""
    if not torch.is_tensor(batch):
        batch = torch.as_tensor(batch)
    out = model(batch)
    if not isinstance(out, NetworkOutputs):
        raise TypeError(f"model must return NetworkOutputs, got {type(out).__name__}")
    return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def to_batch(images: Sequence, device="cpu") -> torch.Tensor:
    """Stack H x W x C float arrays in [0, 1] into a B x C x H x W float32 tensor."""
    import numpy as np

    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(device)
