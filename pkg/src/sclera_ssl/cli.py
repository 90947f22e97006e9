"""Command line interface: make-toy, train, eval, predict, report.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .config import DATA_ENV, ConfigError, RunConfig, load_config, parse_value

log = logging.getLogger("sclera_ssl")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit status 1."""


def _prepare_run_dir(path: Path, force: bool, resume: bool):
    if path.exists() and any(path.iterdir()) and not (force or resume):
        raise UsageError(f"run directory {path} is not empty (use --force to reuse it)")
    path.mkdir(parents=True, exist_ok=True)


def _versions():
    import numpy
    import torch
    from .trainer import _git_revision

    return {"sclera_ssl": __version__, "python": platform.python_version(),
            "numpy": numpy.__version__, "torch": torch.__version__, "git": _git_revision()}


# -- commands ------------------------------------------------------------------------

def cmd_make_toy(args) -> int:
    from .data import ToyDatasetSpec, generate_toy_dataset, save_dataset

    try:
        spec = ToyDatasetSpec(args.count_labeled, args.count_unlabeled, args.count_val,
                              args.count_test, (args.size[0], args.size[1]), args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    try:
        save_dataset(generate_toy_dataset(spec), out)
    except OSError as e:
        raise UsageError(f"cannot write toy dataset to {out}: {e}") from None
    total = spec.count_labeled + spec.count_unlabeled + spec.count_val + spec.count_test
    print(f"wrote {total} images to {out}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = parse_value(val)
    for key, val in (("seed", args.seed), ("data.x_l", args.x_l), ("train.epochs", args.epochs),
                     ("out", args.out), ("data.root", args.data)):
        if val is not None:
            overrides[key] = val
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from .data import DatasetSplit, load_dataset, partition_labeled
    from .metrics import evaluate
    from .trainer import load_checkpoint, model_from_checkpoint, train

    cfg = _run_config(args)
    errors = cfg.validate()
    if errors:
        raise ConfigError("\n  ".join(["invalid configuration:"] + errors))
    run_dir = Path(cfg.out)
    resume = None
    if args.resume:
        resume_path = Path(args.resume) if args.resume != "last" else run_dir / "last.pt"
        if not resume_path.exists():
            raise UsageError(f"no checkpoint to resume from at {resume_path}")
        resume = load_checkpoint(resume_path)
    _prepare_run_dir(run_dir, args.force, resume is not None)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_flat(), indent=2))
    (run_dir / "versions.json").write_text(json.dumps(_versions(), indent=2))
    log.info("config: %s", json.dumps(cfg.to_flat()))

    data = load_dataset(cfg.resolved_root(), cfg.layout)
    x_l = cfg.x_l
    if x_l is not None:
        labeled, unlabeled = partition_labeled(data.train_labeled + data.train_unlabeled,
                                               int(x_l), cfg.partition_seed)
        data = DatasetSplit(labeled, unlabeled, data.validation, data.test, data.rejected)
    log.info("training on %d labeled / %d unlabeled images", len(data.train_labeled),
             len(data.train_unlabeled))
    ckpt, history = train(cfg.train, data, run_dir=run_dir, resume=resume,
                          x_l=len(data.train_labeled), label=args.label or run_dir.name,
                          progress=True)
    history.to_json(run_dir / "history.json")
    if data.test:
        report = evaluate(model_from_checkpoint(ckpt, "best"), data.test)
        report.to_json(run_dir / "test_report.json")
        print(report.table(args.label or "Proposed Method", len(data.train_labeled)))
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _load_eval_inputs(args):
    from .trainer import TrainConfig, load_checkpoint, model_from_checkpoint

    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint {ckpt_path} not found")
    ckpt = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(ckpt, args.weights)
    size = tuple(TrainConfig.from_dict(ckpt["config"]).input_size)
    return ckpt, model, size


def cmd_eval(args) -> int:
    from .data import load_dataset, resize_split, write_image, write_mask
    from .metrics import evaluate, render_overlay

    _, model, size = _load_eval_inputs(args)
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"no dataset root: pass --data or set ${DATA_ENV}")
    data = resize_split(load_dataset(root, require_eval=True), size)
    samples = getattr(data, {"test": "test", "val": "validation", "train": "train_labeled"}[args.split])
    if not samples:
        raise UsageError(f"no labeled samples in split {args.split!r}")
    report, masks = evaluate(model, samples, args.threshold, return_masks=True)
    out = Path(args.out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    table = report.table(args.label, args.x_l if args.x_l is not None else "-")
    (out / "report.txt").write_text(table)
    for s, m in zip(samples, masks):
        stem = s.id.split("/")[-1]
        write_image(out / "overlays" / f"{stem}_overlay.png",
                    render_overlay(m, s.mask, s.image, args.alpha))
        write_mask(out / "masks" / f"{stem}.png", m)
    print(table)
    return EXIT_OK


def cmd_predict(args) -> int:
    import cv2
    from .data import IMAGE_EXTS, read_image, write_mask
    from .metrics import predict_probs

    _, model, size = _load_eval_inputs(args)
    src = Path(args.images)
    if not src.is_dir():
        raise UsageError(f"image directory {src} not found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for path in sorted(src.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTS:
            continue
        try:
            image = read_image(path)
        except (OSError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", path, e)
            continue
        H, W = image.shape[:2]
        net_in = image
        if (H, W) != size:
            net_in = cv2.resize(image.astype(np.float32), (size[1], size[0]),
                                interpolation=cv2.INTER_AREA).astype(np.float64)
            if net_in.ndim == 2:
                net_in = net_in[..., None]
        prob = predict_probs(model, [np.clip(net_in, 0, 1)])[0]
        mask = (prob > args.threshold).astype(np.uint8)
        if (H, W) != size:
            mask = cv2.resize(mask, (W, H), interpolation=cv2.INTER_NEAREST)
            prob = cv2.resize(prob.astype(np.float32), (W, H), interpolation=cv2.INTER_LINEAR)
        write_mask(out / f"{path.stem}_mask.png", mask)
        np.save(out / f"{path.stem}_prob.npy", prob.astype(np.float32))
        n += 1
    print(f"wrote {n} masks to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import write_report
    from .trainer import TrainHistory

    histories = []
    for p in args.histories:
        path = Path(p)
        if path.is_dir():
            path = path / "history.json"
        try:
            histories.append((path, TrainHistory.from_json(path)))
        except (OSError, ValueError, TypeError, KeyError) as e:
            raise UsageError(f"cannot read history {path}: {e}") from None
    files = write_report(histories, Path(args.out))
    for f in files:
        print(f)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sclera-ssl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("make-toy", help="write a synthetic eye dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--count-labeled", type=int, default=8)
    t.add_argument("--count-unlabeled", type=int, default=64)
    t.add_argument("--count-val", type=int, default=8)
    t.add_argument("--count-test", type=int, default=8)
    t.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    t.add_argument("--seed", type=int, default=7)
    t.set_defaults(func=cmd_make_toy)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", help=f"dataset root (default ${DATA_ENV})")
    t.add_argument("--seed", type=int)
    t.add_argument("--x-l", type=int, dest="x_l")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out")
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume", nargs="?", const="last",
                   help="checkpoint to resume from (default: <out>/last.pt)")
    t.add_argument("--label", default="")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any dotted config key")
    t.set_defaults(func=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "score a checkpoint on a labeled split"),
                          ("predict", cmd_predict, "write masks for a folder of images")):
        t = sub.add_parser(name, help=hlp)
        t.add_argument("--checkpoint", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--threshold", type=float, default=0.5)
        t.add_argument("--weights", choices=("best", "last"), default="best")
        if name == "eval":
            t.add_argument("--data")
            t.add_argument("--split", choices=("test", "val", "train"), default="test")
            t.add_argument("--alpha", type=float, default=0.5, help="overlay blend factor")
            t.add_argument("--label", default="Proposed Method")
            t.add_argument("--x-l", dest="x_l")
        else:
            t.add_argument("--images", required=True)
        t.set_defaults(func=fn)

    t = sub.add_parser("report", help="plot and tabulate training histories")
    t.add_argument("histories", nargs="+", help="history.json files or run directories")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from .data import DatasetError

    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        log.exception("command failed")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
