"""Datasets on disk, labeled/unlabeled partitioning, resizing and a synthetic
eye-image generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
MASK_THRESHOLD = 127


class DatasetError(Exception):
    """Unrecoverable problem with a dataset directory or partition request."""


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ImageSample:
    id: str
    image: np.ndarray  # H x W x C float in [0, 1]
    mask: Optional[np.ndarray] = None  # H x W uint8 in {0, 1}
    labeled: bool = False

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim == 2:
            img = img[..., None]
        if img.ndim != 3 or img.shape[2] not in (1, 3):
            raise ValueError(f"{self.id}: image must be H x W x C with C in {{1, 3}}, got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError(f"{self.id}: in-memory image values must lie in [0, 1]")
        object.__setattr__(self, "image", _frozen(img))
        if (self.mask is not None) != self.labeled:
            raise ValueError(f"{self.id}: mask must be present iff the sample is labeled")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.shape != img.shape[:2]:
                raise ValueError(f"{self.id}: mask shape {m.shape} != image shape {img.shape[:2]}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{self.id}: mask values must be 0 or 1")
            object.__setattr__(self, "mask", _frozen(m.astype(np.uint8)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape[:2]

    def unlabeled(self) -> "ImageSample":
        return ImageSample(self.id, self.image, None, False)


@dataclass
class DatasetSplit:
    train_labeled: List[ImageSample] = field(default_factory=list)
    train_unlabeled: List[ImageSample] = field(default_factory=list)
    validation: List[ImageSample] = field(default_factory=list)
    test: List[ImageSample] = field(default_factory=list)
    rejected: List[str] = field(default_factory=list)

    def __post_init__(self):
        for part in ("validation", "test"):
            for s in getattr(self, part):
                if not s.labeled:
                    raise ValueError(f"{part} sample {s.id} has no mask")
        seen = set()
        for s in self.all_samples():
            if s.id in seen:
                raise ValueError(f"sample id {s.id} appears in more than one partition")
            seen.add(s.id)

    def all_samples(self) -> List[ImageSample]:
        return self.train_labeled + self.train_unlabeled + self.validation + self.test

    def __len__(self):
        return len(self.all_samples())


@dataclass(frozen=True)
class DatasetLayout:
    train: str = "train"
    val: str = "val"
    test: str = "test"
    images: str = "images"
    masks: str = "masks"
    image_exts: Tuple[str, ...] = IMAGE_EXTS


# -- disk I/O -------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "I", "I;16", "1") else im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def write_image(path, image: np.ndarray):
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def write_mask(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def _load_partition(part_dir: Path, layout: DatasetLayout, rejected: List[str]):
    img_dir = part_dir / layout.images
    if not img_dir.is_dir():
        raise DatasetError(f"missing image directory {img_dir}")
    mask_dir = part_dir / layout.masks
    labeled, unlabeled = [], []
    for path in sorted(img_dir.iterdir()):
        if path.suffix.lower() not in layout.image_exts:
            continue
        image = read_image(path)
        mask_path = mask_dir / (path.stem + ".png")
        sid = f"{part_dir.name}/{path.stem}"
        if mask_path.exists():
            mask = read_mask(mask_path)
            if mask.shape != image.shape[:2]:
                log.warning("rejecting %s: mask %s does not match image %s",
                            sid, mask.shape, image.shape[:2])
                rejected.append(sid)
                continue
            labeled.append(ImageSample(sid, image, mask, True))
        else:
            unlabeled.append(ImageSample(sid, image))
    return labeled, unlabeled


def load_dataset(root, layout: Optional[DatasetLayout] = None, require_eval: bool = True) -> DatasetSplit:
    """Read ``<root>/{train,val,test}/{images,masks}``.

    Training images without a mask become unlabeled samples. Mask-less
    validation or test images are rejected with a warning.
    """
    layout = layout or DatasetLayout()
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    rejected: List[str] = []
    train_l, train_u = _load_partition(root / layout.train, layout, rejected)
    evals = {}
    for name in ("val", "test"):
        part = root / getattr(layout, name)
        if not part.exists() and not require_eval:
            evals[name] = []
            continue
        lab, unl = _load_partition(part, layout, rejected)
        for s in unl:
            log.warning("rejecting %s: evaluation image without mask", s.id)
            rejected.append(s.id)
        evals[name] = lab
    if not train_l:
        raise DatasetError(f"no labeled training samples under {root / layout.train}")
    if rejected:
        log.warning("%d sample(s) rejected while loading %s", len(rejected), root)
    return DatasetSplit(train_l, train_u, evals["val"], evals["test"], rejected)


def save_dataset(split: DatasetSplit, root, layout: Optional[DatasetLayout] = None):
    layout = layout or DatasetLayout()
    root = Path(root)
    parts = ((layout.train, split.train_labeled + split.train_unlabeled),
             (layout.val, split.validation), (layout.test, split.test))
    for part, samples in parts:
        (root / part / layout.images).mkdir(parents=True, exist_ok=True)
        (root / part / layout.masks).mkdir(parents=True, exist_ok=True)
        for s in samples:
            stem = s.id.split("/")[-1]
            write_image(root / part / layout.images / f"{stem}.png", s.image)
            if s.labeled:
                write_mask(root / part / layout.masks / f"{stem}.png", s.mask)


# -- partitioning and resizing ----------------------------------------------------

def partition_labeled(train: Sequence[ImageSample], x_l: int, seed: int):
    """Keep labels on ``x_l`` randomly chosen samples and strip the rest.

    Returns (labeled, unlabeled); already-unlabeled inputs join the
    unlabeled list after the stripped ones.
    """
    pool = [s for s in train if s.labeled]
    extra = [s for s in train if not s.labeled]
    if x_l < 0 or x_l > len(pool):
        raise DatasetError(f"x_l={x_l} but only {len(pool)} labeled training samples exist")
    order = np.random.default_rng(seed).permutation(len(pool))
    keep = set(order[:x_l].tolist())
    labeled = [pool[i] for i in range(len(pool)) if i in keep]
    stripped = [pool[i].unlabeled() for i in range(len(pool)) if i not in keep]
    return labeled, stripped + extra


def resize_sample(sample: ImageSample, target: Tuple[int, int]) -> ImageSample:
    """Resize to ``target`` = (H, W): area/bilinear for the image, nearest for the mask."""
    H, W = int(target[0]), int(target[1])
    if H < 8 or W < 8:
        raise ValueError(f"target size must be >= 8 px, got {target}")
    if sample.shape == (H, W):
        return sample
    src = np.asarray(sample.image, dtype=np.float32)
    shrinking = H < src.shape[0] and W < src.shape[1]
    interp = cv2.INTER_AREA if shrinking else cv2.INTER_LINEAR
    img = cv2.resize(src, (W, H), interpolation=interp)
    if img.ndim == 2:
        img = img[..., None]
    img = np.clip(img.astype(np.float64), 0.0, 1.0)
    mask = None
    if sample.mask is not None:
        mask = cv2.resize(np.asarray(sample.mask, dtype=np.uint8), (W, H),
                          interpolation=cv2.INTER_NEAREST)
    return ImageSample(sample.id, img, mask, sample.labeled)


def resize_split(split: DatasetSplit, target: Tuple[int, int]) -> DatasetSplit:
    r = lambda xs: [resize_sample(s, target) for s in xs]
    return DatasetSplit(r(split.train_labeled), r(split.train_unlabeled), r(split.validation),
                        r(split.test), list(split.rejected))


# -- synthetic eyes ----------------------------------------------------------------

@dataclass(frozen=True)
class ToyDatasetSpec:
    count_labeled: int = 8
    count_unlabeled: int = 64
    count_val: int = 8
    count_test: int = 8
    image_size: Tuple[int, int] = (64, 64)
    seed: int = 7

    def __post_init__(self):
        counts = (self.count_labeled, self.count_unlabeled, self.count_val, self.count_test)
        if min(counts) < 0:
            raise ValueError("toy dataset counts must be >= 0")
        if min(self.image_size) < 32:
            raise ValueError(f"toy image size must be at least 32x32, got {self.image_size}")


def _smooth_noise(rng, H, W, scale):
    coarse = rng.standard_normal((max(2, H // scale), max(2, W // scale))).astype(np.float32)
    return cv2.resize(coarse, (W, H), interpolation=cv2.INTER_CUBIC).astype(np.float64)


def toy_eye(rng: np.random.Generator, size: Tuple[int, int]):
    """One synthetic eye: (H x W grayscale in [0,1], H x W sclera mask)."""
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cx = W / 2 + rng.uniform(-0.08, 0.08) * W
    cy = H / 2 + rng.uniform(-0.08, 0.08) * H
    a = rng.uniform(0.34, 0.46) * W  # eye opening half-width
    b = rng.uniform(0.16, 0.26) * H  # eye opening half-height
    tilt = rng.uniform(-0.25, 0.25)
    c, s = np.cos(tilt), np.sin(tilt)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    eye = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # iris sits inside the opening, shifted with gaze, taller than the opening
    ir = rng.uniform(0.9, 1.25) * b
    ix = cx + rng.uniform(-0.35, 0.35) * (a - ir)
    iy = cy + rng.uniform(-0.15, 0.15) * b
    rr = np.hypot(xx - ix, yy - iy)
    iris = rr <= ir
    pupil = rr <= ir * rng.uniform(0.3, 0.5)
    sclera = eye & ~iris

    skin_level = rng.uniform(0.3, 0.5)
    img = skin_level + 0.06 * _smooth_noise(rng, H, W, 8) + 0.03 * rng.standard_normal((H, W))
    sclera_level = rng.uniform(0.72, 0.9)
    img = np.where(sclera, sclera_level + 0.04 * _smooth_noise(rng, H, W, 4), img)
    iris_level = rng.uniform(0.12, 0.3)
    img = np.where(eye & iris, iris_level + 0.05 * np.cos(np.arctan2(yy - iy, xx - ix) * 12), img)
    img = np.where(eye & pupil, 0.04, img)
    # soft eyelid shadow at the opening rim
    rim = np.abs(np.sqrt((u / a) ** 2 + (v / b) ** 2) - 1.0) < 0.06
    img = np.where(rim, img * 0.7, img)
    gx, gy = rng.uniform(-0.25, 0.25, size=2)
    illum = 1.0 + gx * (xx / W - 0.5) + gy * (yy / H - 0.5)
    img = img * illum
    for _ in range(int(rng.integers(1, 4))):
        sx, sy = rng.uniform(0.2, 0.8) * W, rng.uniform(0.2, 0.8) * H
        img = np.where(np.hypot(xx - sx, yy - sy) <= max(1.0, 0.02 * W), 1.0, img)
    img = np.clip(img, 0.0, 1.0)
    img = np.rint(img * 255.0) / 255.0
    return img, sclera.astype(np.uint8)


def generate_toy_dataset(spec: ToyDatasetSpec) -> DatasetSplit:
    """Synthetic eyes: two bright sclera crescents flanking a dark iris.

    Images are grayscale replicated to three channels and quantized to 8 bits
    so a disk round trip is lossless.
    """
    rng = np.random.default_rng(spec.seed)
    parts = {}
    counts = (("train_labeled", spec.count_labeled, True),
              ("train_unlabeled", spec.count_unlabeled, False),
              ("validation", spec.count_val, True), ("test", spec.count_test, True))
    for name, n, labeled in counts:
        prefix = {"train_labeled": "train/l", "train_unlabeled": "train/u",
                  "validation": "val/v", "test": "test/t"}[name]
        out = []
        for i in range(n):
            img, mask = toy_eye(rng, spec.image_size)
            rgb = np.repeat(img[..., None], 3, axis=2)
            out.append(ImageSample(f"{prefix}{i:04d}", rgb, mask if labeled else None, labeled))
        parts[name] = out
    return DatasetSplit(**parts)
