"""Semi-supervised training loop.

Each step draws a few labeled and a few unlabeled images. Unlabeled images
get ``k`` photometric copies; averaging the model's predictions over the
copies gives one guessed label (SSLD). The same copies are then moved by
random rigid transforms, predicted, and warped back; averaging those gives
a second guessed label (SSL-SS). The model is trained on

    L = L_s + lambda_u * L_u + lambda_ss * L_ss

where L_u and L_ss are squared errors against the two guesses. Guesses are
computed without gradient and in inference mode.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import __version__
from .augment import AugmentConfig, apply_params, augment_k, sample_domain_augmentation
from .data import DatasetError, DatasetSplit, ImageSample, resize_split
from .losses import (LossConfig, LossWeights, boundary_weight_map, consistency_loss_ss,
                     consistency_loss_u, schedule, side_loss, signed_distance_map,
                     supervised_loss, total_loss)
from .metrics import evaluate
from .network import NetworkOutputs, U2NetPlusConfig, build_model, to_batch
from .spatial import SpatialTransform, sample_transform, warp_tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 2
    learning_rate: float = 1e-3
    k: int = 2
    seed: int = 0
    input_size: Tuple[int, int] = (256, 256)
    base_channels: int = 64
    num_classes: int = 2
    deep_supervision: bool = True
    p1: float = 0.5
    p2: float = 0.5
    max_rotate_deg: float = 5.0
    max_translate_px: int = 20
    ssld_target: str = "live"  # or "snapshot": SSL-SS guesses from a per-epoch frozen copy
    supervised_only: bool = False
    joint_forward: bool = False  # True: one pass, shared batch-norm statistics for both pools
    steps_per_epoch: Optional[int] = None  # None: enough to visit every image once
    bn_recalibration: bool = True
    num_threads: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        errors = []
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.labeled_per_batch < 1:
            errors.append("labeled_per_batch must be >= 1")
        if self.unlabeled_per_batch < 1:
            errors.append("unlabeled_per_batch must be >= 1")
        if self.k < 1:
            errors.append("k must be >= 1")
        if not (0 <= self.p1 <= 1 and 0 <= self.p2 <= 1):
            errors.append("p1 and p2 must lie in [0, 1]")
        if self.ssld_target not in ("live", "snapshot"):
            errors.append("ssld_target must be 'live' or 'snapshot'")
        if self.learning_rate <= 0:
            errors.append("learning_rate must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            errors.append("steps_per_epoch must be >= 1")
        try:
            self.network_config(3).validate()
        except ValueError as e:
            errors.append(str(e))
        return errors

    def network_config(self, in_channels: int) -> U2NetPlusConfig:
        return U2NetPlusConfig(num_classes=self.num_classes, base_channels=self.base_channels,
                               in_channels=in_channels, input_size=tuple(self.input_size))

    def loss_config(self) -> LossConfig:
        if self.supervised_only:
            return replace(self.loss, slope_u=0.0, slope_ss=0.0, deep_supervision=self.deep_supervision)
        return replace(self.loss, deep_supervision=self.deep_supervision)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        aug = d.pop("augment", {})
        aug = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug.items()})
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(loss=loss, augment=aug, **d)


@dataclass
class GuessedLabel:
    probs: torch.Tensor  # P x H x W
    validity: torch.Tensor  # H x W, 0/1
    source: str = "SSLD"


@dataclass
class TrainHistory:
    records: List[Dict] = field(default_factory=list)
    config: Dict = field(default_factory=dict)
    x_l: Optional[int] = None
    label: str = ""

    def append(self, record: Dict):
        if self.records and record["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError("history epochs must be consecutive")
        self.records.append(record)

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def from_json(cls, path) -> "TrainHistory":
        d = json.loads(Path(path).read_text())
        if not isinstance(d, dict) or "records" not in d:
            raise ValueError(f"{path}: not a training history file")
        for r in d["records"]:
            if "epoch" not in r or "val_miou" not in r:
                raise ValueError(f"{path}: malformed history record {r!r}")
        return cls(**d)


# -- label guessing ---------------------------------------------------------------

@torch.no_grad()
def _predict_eval(model, batch: torch.Tensor) -> torch.Tensor:
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        return model(batch).fused_probs.detach()
    finally:
        if was_training:
            model.train()


def average_guess(probs: torch.Tensor, validity: torch.Tensor, source: str) -> GuessedLabel:
    """Validity-weighted mean of k predictions (k x P x H x W, k x H x W)."""
    v = validity.to(probs.dtype)
    count = v.sum(dim=0)
    acc = (probs * v[:, None]).sum(dim=0)
    union = count > 0
    # bilinear weights of valid pixels come only from in-frame sources, so
    # each warped prediction still sums to one and needs no renormalizing
    guess = torch.where(union[None], acc / count.clamp_min(1.0)[None], torch.zeros_like(acc))
    return GuessedLabel(guess, union.to(probs.dtype), source)


def guess_labels_ssld(model, x_u, k: int, rng: np.random.Generator,
                      augment: Optional[AugmentConfig] = None, copies=None):
    """Average of the model's predictions over ``k`` photometric copies of ``x_u``.

    Returns (GuessedLabel, copies).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if copies is None:
        copies = augment_k(x_u, k, rng, "unlabeled", augment)
    probs = _predict_eval(model, to_batch(copies))
    ones = torch.ones(probs.shape[0], *probs.shape[2:], dtype=probs.dtype)
    return average_guess(probs, ones, "SSLD"), copies


def transform_copies(copies, transforms: Sequence[SpatialTransform]):
    """Warp each copy by its transform: (k x C x H x W batch, k x H x W validity)."""
    batch = to_batch(copies)
    outs, valids = [], []
    for a, t in enumerate(transforms):
        o, v = warp_tensor(t, batch[a:a + 1])
        outs.append(o)
        valids.append(v)
    return torch.cat(outs), torch.cat(valids)


def warp_back(probs: torch.Tensor, transforms: Sequence[SpatialTransform], validity: torch.Tensor):
    """Inverse-warp per-copy predictions (differentiable)."""
    outs, valids = [], []
    for a, t in enumerate(transforms):
        o, v = warp_tensor(t.inverse(), probs[a:a + 1], validity[a:a + 1])
        outs.append(o)
        valids.append(v)
    return torch.cat(outs), torch.cat(valids)


def guess_labels_sslss(model, x_u, k: int, rng: np.random.Generator, p1: float = 0.5,
                       p2: float = 0.5, augment: Optional[AugmentConfig] = None,
                       copies=None, transforms=None, max_rotate_deg: float = 5.0,
                       max_translate_px: int = 20):
    """Average of inverse-warped predictions on transformed copies.

    Returns (GuessedLabel, transformed copies, transforms). Pixels are
    averaged over the copies that see them; the label's validity is the
    union of per-copy validity.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if copies is None:
        copies = augment_k(x_u, k, rng, "unlabeled", augment)
    if transforms is None:
        transforms = [sample_transform(rng, p1, p2, max_rotate_deg, max_translate_px)
                      for _ in copies]
    moved, v_fwd = transform_copies(copies, transforms)
    probs = _predict_eval(model, moved)
    back, v_back = warp_back(probs, transforms, v_fwd)
    return average_guess(back, v_back, "SSL-SS"), moved, transforms


# -- training ----------------------------------------------------------------------

class _TargetCache:
    """Boundary weights and signed distance maps per labeled sample."""

    def __init__(self, sigma: float):
        self.sigma = sigma
        self._cache = {}

    def get(self, sample: ImageSample):
        hit = self._cache.get(sample.id)
        if hit is None:
            hit = (boundary_weight_map(sample.mask, self.sigma), signed_distance_map(sample.mask))
            self._cache[sample.id] = hit
        return hit


def _labeled_inputs(labeled: Sequence[ImageSample], rng: np.random.Generator, config: TrainConfig):
    images = []
    for s in labeled:
        params = sample_domain_augmentation(rng, "labeled", config.augment)
        images.append(apply_params(s.image, params, config.augment.order))
    return to_batch(images)


def _supervised_loss(out: NetworkOutputs, labeled: Sequence[ImageSample], weights: LossWeights,
                     config: TrainConfig, cache: _TargetCache):
    gt = torch.from_numpy(np.stack([s.mask for s in labeled]).astype(np.int64))
    bal, sdm = zip(*(cache.get(s) for s in labeled))
    bal = torch.from_numpy(np.stack(bal)).float()
    sdm = torch.from_numpy(np.stack(sdm)).float()
    l_fuse, parts = supervised_loss(out.fused_probs, gt, weights, bal, sdm, config.loss.dice_eps)
    l_s = l_fuse
    if config.deep_supervision:
        l_side = torch.stack([side_loss(p, gt, config.loss.dice_eps) for p in out.side_probs]).mean()
        l_s = l_s + l_side
        parts["side"] = float(l_side.detach())
    return l_s, parts


def _unsupervised_targets(model, guess_model, unlabeled: Sequence[np.ndarray],
                          rng: np.random.Generator, config: TrainConfig):
    """Augment, transform and guess labels for a batch of unlabeled images.

    Returns the loss-pass input (plain copies, then transformed copies) and
    the targets needed to score it.
    """
    k = config.k
    copies = []
    for x in unlabeled:
        copies.extend(augment_k(x, k, rng, "unlabeled", config.augment))
    transforms = [sample_transform(rng, config.p1, config.p2, config.max_rotate_deg,
                                   config.max_translate_px) for _ in copies]
    plain = to_batch(copies)
    moved, v_fwd = transform_copies(copies, transforms)
    n = len(copies)
    if guess_model is model:
        guess_probs = _predict_eval(model, torch.cat([plain, moved]))
        p_plain, p_moved = guess_probs[:n], guess_probs[n:]
    else:
        p_plain = _predict_eval(model, plain)
        p_moved = _predict_eval(guess_model, moved)
    back, v_back = warp_back(p_moved, transforms, v_fwd)
    ones = torch.ones(n, *plain.shape[2:])
    targets_u, targets_ss = [], []
    for i in range(len(unlabeled)):
        sl = slice(i * k, (i + 1) * k)
        g_u = average_guess(p_plain[sl], ones[sl], "SSLD")
        g_ss = average_guess(back[sl], v_back[sl], "SSL-SS")
        targets_u.append(g_u.probs.expand(k, *g_u.probs.shape))
        targets_ss.append(g_ss.probs.expand(k, *g_ss.probs.shape))
    return torch.cat([plain, moved]), (torch.cat(targets_u), torch.cat(targets_ss), transforms, v_fwd)


def _consistency_losses(fused_probs: torch.Tensor, targets):
    targets_u, targets_ss, transforms, v_fwd = targets
    n = targets_u.shape[0]
    pred_u, pred_moved = fused_probs[:n], fused_probs[n:]
    pred_back, v_pred = warp_back(pred_moved, transforms, v_fwd)
    return consistency_loss_u(pred_u, targets_u), consistency_loss_ss(pred_back, targets_ss, v_pred)


def train_step(model, optimizer, labeled: Sequence[ImageSample], unlabeled: Sequence,
               weights: LossWeights, rng_labeled: np.random.Generator,
               rng_unlabeled: Optional[np.random.Generator], config: TrainConfig,
               cache: Optional[_TargetCache] = None, guess_model=None) -> Dict[str, float]:
    """One optimizer step on L_s + lambda_u * L_u + lambda_ss * L_ss.

    While both unsupervised weights are zero the unlabeled batch is skipped,
    so the update (batch-norm statistics included) equals a purely
    supervised step. Labeled and unlabeled inputs go through separate
    forward passes unless ``config.joint_forward`` is set: with k copies,
    plain and warped, the unlabeled part would otherwise dominate the
    batch statistics seen by the supervised loss.
    """
    cache = cache or _TargetCache(config.loss.boundary_sigma)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    x_l = _labeled_inputs(labeled, rng_labeled, config)
    n_l = x_l.shape[0]
    l_u = l_ss = torch.zeros(())
    if unlabeled and (weights.lambda_u != 0.0 or weights.lambda_ss != 0.0):
        images = [getattr(x, "image", x) for x in unlabeled]
        x_u, targets = _unsupervised_targets(model, guess_model or model, images,
                                             rng_unlabeled, config)
        if config.joint_forward:
            out = model(torch.cat([x_l, x_u]))
            out_l = NetworkOutputs([s[:n_l] for s in out.side_logits], out.fused_logits[:n_l],
                                   [p[:n_l] for p in out.side_probs], out.fused_probs[:n_l])
            fused_u = out.fused_probs[n_l:]
        else:
            out_l = model(x_l)
            fused_u = model(x_u).fused_probs
        l_s, parts = _supervised_loss(out_l, labeled, weights, config, cache)
        l_u, l_ss = _consistency_losses(fused_u, targets)
    else:
        l_s, parts = _supervised_loss(model(x_l), labeled, weights, config, cache)
    try:
        loss = total_loss(l_s, l_u, l_ss, weights)
    except FloatingPointError as e:
        raise FloatingPointError(f"{e}; components: L_s={float(l_s):.6g} {parts} "
                                 f"L_u={float(l_u):.6g} L_ss={float(l_ss):.6g}") from None
    loss.backward()
    optimizer.step()
    out = dict(parts)
    out.update(L_s=float(l_s.detach()), L_u=float(l_u.detach()), L_ss=float(l_ss.detach()),
               total=float(loss.detach()))
    return out


@torch.no_grad()
def recalibrate_batchnorm(model, images: Sequence[np.ndarray], batch_size: int = 8):
    """Replace batch-norm running statistics by exact averages over ``images``.

    Two-image training batches give noisy running estimates, and they only
    ever see augmented inputs; inference then uses statistics that match
    neither. One pass over the plain training images fixes both.
    """
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms or not images:
        return
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    was_training = model.training
    model.train()
    try:
        for i in range(0, len(images), batch_size):
            model(to_batch(images[i:i + batch_size]))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.train(was_training)


def make_optimizer(model, config: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, foreach=True)


def epoch_plan(n_labeled: int, n_unlabeled: int, config: TrainConfig, rng: np.random.Generator):
    """Index batches for one epoch: every unlabeled sample once, labeled pool cycled.

    ``config.steps_per_epoch`` overrides the step count; both pools are then
    cycled as needed.
    """
    steps = math.ceil(n_labeled / config.labeled_per_batch)
    if n_unlabeled:
        steps = max(steps, math.ceil(n_unlabeled / config.unlabeled_per_batch))
    if config.steps_per_epoch:
        steps = config.steps_per_epoch

    def cycled(n, per):
        need = steps * per
        reps = [rng.permutation(n) for _ in range(math.ceil(need / n))]
        return np.concatenate(reps)[:need].reshape(steps, per)

    lab = cycled(n_labeled, config.labeled_per_batch)
    unl = cycled(n_unlabeled, config.unlabeled_per_batch) if n_unlabeled else None
    return lab, unl


def _epoch_rngs(seed: int, epoch: int):
    seq = np.random.SeedSequence([seed, epoch])
    return [np.random.default_rng(s) for s in seq.spawn(3)]


def _git_revision() -> Optional[str]:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        return res.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def save_checkpoint(path, state: Dict):
    path = Path(path)
    torch.save(state, path)
    meta = {"config": state["config"], "epoch": state["epoch"], "best_val_miou": state.get("best_val_miou"),
            "in_channels": state.get("in_channels"), "version": __version__,
            "torch": torch.__version__, "git": _git_revision()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(ckpt, which: str = "best"):
    if not isinstance(ckpt, dict):
        ckpt = load_checkpoint(ckpt)
    config = TrainConfig.from_dict(ckpt["config"])
    model = build_model(config.network_config(ckpt.get("in_channels", 3)))
    key = "best_model" if which == "best" and ckpt.get("best_model") is not None else "model"
    model.load_state_dict(ckpt[key])
    model.eval()
    return model


class _JsonlLog:
    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "a") if path else None

    def write(self, record: Dict):
        if self.fh:
            self.fh.write(json.dumps(record) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def train(config: TrainConfig, data: DatasetSplit, run_dir=None, resume=None,
          x_l: Optional[int] = None, label: str = "", progress: bool = False):
    """Train from scratch (or resume) and return (checkpoint dict, TrainHistory).

    The checkpoint dict holds the last weights under ``model`` and the best
    validation-mIoU weights under ``best_model``.
    """
    errors = config.validate()
    if errors:
        raise ValueError("invalid training config: " + "; ".join(errors))
    if not data.train_labeled:
        raise DatasetError("training needs at least one labeled sample")
    torch.set_num_threads(config.num_threads)
    size = tuple(config.input_size)
    if any(s.shape != size for s in data.all_samples()):
        data = resize_split(data, size)
    labeled = data.train_labeled
    unlabeled = [] if config.supervised_only else data.train_unlabeled
    in_ch = labeled[0].image.shape[2]
    loss_cfg = config.loss_config()

    torch.manual_seed(config.seed)
    model = build_model(config.network_config(in_ch))
    optimizer = make_optimizer(model, config)
    history = TrainHistory(config=config.to_dict(), x_l=x_l if x_l is not None else len(labeled),
                           label=label)
    start_epoch = 0
    best_miou = -1.0
    best_state = None
    if resume is not None:
        ckpt = resume if isinstance(resume, dict) else load_checkpoint(resume)
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        start_epoch = ckpt["epoch"]
        history = TrainHistory(**ckpt["history"])
        best_miou = ckpt.get("best_val_miou", -1.0)
        best_state = ckpt.get("best_model")

    run_dir = Path(run_dir) if run_dir else None
    step_log = _JsonlLog(run_dir / "train_log.jsonl" if run_dir else None)
    cache = _TargetCache(loss_cfg.boundary_sigma)
    eval_set = data.validation or data.train_labeled
    calib_images = [s.image for s in labeled + list(unlabeled)]
    ckpt = None
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.time()
            weights = schedule(epoch, loss_cfg)
            rng_order, rng_l, rng_u = _epoch_rngs(config.seed, epoch)
            lab_idx, unl_idx = epoch_plan(len(labeled), len(unlabeled), config, rng_order)
            guess_model = model
            if config.ssld_target == "snapshot" and unlabeled:
                guess_model = copy.deepcopy(model)
            sums: Dict[str, float] = {}
            for step in range(len(lab_idx)):
                lb = [labeled[i] for i in lab_idx[step]]
                ub = [unlabeled[i] for i in unl_idx[step]] if unl_idx is not None else []
                step_cfg = replace(config, loss=loss_cfg)
                losses = train_step(model, optimizer, lb, ub, weights, rng_l, rng_u, step_cfg,
                                    cache, guess_model)
                step_log.write({"kind": "step", "epoch": epoch, "step": step, **losses})
                for key, val in losses.items():
                    sums[key] = sums.get(key, 0.0) + val
            if config.bn_recalibration:
                recalibrate_batchnorm(model, calib_images)
            report = evaluate(model, eval_set)
            record = {"epoch": epoch, **{k: v / len(lab_idx) for k, v in sums.items()},
                      "val_miou": report.mean_iou, "val_f1": report.mean_f1,
                      "val_recall": report.mean_recall, "val_precision": report.mean_precision,
                      "alpha": weights.alpha, "lambda_u": weights.lambda_u,
                      "lambda_ss": weights.lambda_ss, "steps": len(lab_idx)}
            history.append(record)
            step_log.write({"kind": "epoch", **record, "seconds": round(time.time() - t0, 3)})
            if report.mean_iou > best_miou:
                best_miou = report.mean_iou
                best_state = copy.deepcopy(model.state_dict())
            ckpt = {"config": config.to_dict(), "in_channels": in_ch, "epoch": epoch + 1,
                    "model": model.state_dict(), "optimizer": optimizer.state_dict(),
                    "best_model": best_state, "best_val_miou": best_miou,
                    "history": asdict(history), "rng": {"seed": config.seed,
                                                         "torch": torch.get_rng_state()}}
            if run_dir:
                save_checkpoint(run_dir / "last.pt", ckpt)
                if best_state is not None and best_miou == report.mean_iou:
                    save_checkpoint(run_dir / "best.pt", {**ckpt, "model": best_state})
                history.to_json(run_dir / "history.json")
            if progress:
                log.info("epoch %d: total %.4f val mIoU %.4f", epoch, record.get("total", 0.0),
                         report.mean_iou)
    finally:
        step_log.close()
    if ckpt is None:  # resumed at or past the final epoch
        ckpt = resume if isinstance(resume, dict) else load_checkpoint(resume)
    return ckpt, history
