"""Run configuration as a flat mapping of dotted keys.

Example file::

    {
      "data.root": "toy_data",
      "data.x_l": 4,
      "train.epochs": 60,
      "train.input_size": [64, 64],
      "loss.lambda2": 20.0,
      "augment.clips": [1.0, 1.2, 1.5, 1.5, 1.5, 2.0],
      "seed": 0
    }

``train.*``, ``loss.*`` and ``augment.*`` keys map onto TrainConfig,
LossConfig and AugmentConfig fields; ``data.*`` covers the dataset root,
directory layout and labeled-count partition.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from .augment import AugmentConfig
from .data import DatasetLayout
from .losses import LossConfig
from .trainer import TrainConfig

DATA_ENV = "SCLERA_SSL_DATA"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_root: Optional[str] = None
    layout: DatasetLayout = field(default_factory=DatasetLayout)
    x_l: Optional[int] = None
    partition_seed: int = 0
    out: Optional[str] = None
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {"data.root": self.data_root, "data.x_l": self.x_l,
                                "data.partition_seed": self.partition_seed, "out": self.out,
                                "seed": self.train.seed}
        for k, v in asdict(self.layout).items():
            flat[f"data.layout.{k}"] = list(v) if isinstance(v, tuple) else v
        for k, v in self.train.to_dict().items():
            if k in ("loss", "augment", "seed"):
                continue
            flat[f"train.{k}"] = list(v) if isinstance(v, tuple) else v
        for k, v in asdict(self.train.loss).items():
            flat[f"loss.{k}"] = v
        for k, v in asdict(self.train.augment).items():
            flat[f"augment.{k}"] = list(v) if isinstance(v, tuple) else v
        return flat

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "RunConfig":
        errors: List[str] = []
        top, layout, train, loss, aug = {}, {}, {}, {}, {}
        names = {
            "train": {f.name for f in fields(TrainConfig)} - {"loss", "augment"},
            "loss": {f.name for f in fields(LossConfig)},
            "augment": {f.name for f in fields(AugmentConfig)},
            "layout": {f.name for f in fields(DatasetLayout)},
        }
        for key, val in flat.items():
            if key.startswith("data.layout."):
                sub = key[len("data.layout."):]
                _put(layout, names["layout"], sub, val, key, errors)
            elif key in ("data.root", "data.x_l", "data.partition_seed", "out"):
                top[key] = val
            elif key == "seed":
                train["seed"] = val
            elif key.startswith("train."):
                _put(train, names["train"], key[6:], val, key, errors)
            elif key.startswith("loss."):
                _put(loss, names["loss"], key[5:], val, key, errors)
            elif key.startswith("augment."):
                _put(aug, names["augment"], key[8:], val, key, errors)
            else:
                errors.append(f"unknown config key {key!r}")
        try:
            layout_obj = DatasetLayout(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in layout.items()})
            aug_obj = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                       for k, v in aug.items()})
            loss_obj = LossConfig(**loss)
            if "input_size" in train:
                train["input_size"] = tuple(train["input_size"])
            train_obj = TrainConfig(loss=loss_obj, augment=aug_obj, **train)
        except (TypeError, ValueError) as e:
            errors.append(str(e))
        if errors:
            raise ConfigError("; ".join(errors))
        cfg = cls(data_root=top.get("data.root"), layout=layout_obj, x_l=top.get("data.x_l"),
                  partition_seed=int(top.get("data.partition_seed", 0) or 0), out=top.get("out"),
                  train=train_obj)
        return cfg

    def validate(self) -> List[str]:
        errors = list(self.train.validate())
        root = self.data_root or os.environ.get(DATA_ENV)
        if not root:
            errors.append(f"no dataset root: set data.root, --data or ${DATA_ENV}")
        elif not Path(root).is_dir():
            errors.append(f"dataset root {root} does not exist")
        if self.x_l is not None and int(self.x_l) < 1:
            errors.append("data.x_l must be >= 1")
        if not self.out:
            errors.append("no run directory: set out or --out")
        return errors

    def resolved_root(self) -> Optional[str]:
        return self.data_root or os.environ.get(DATA_ENV)


def _put(target: Dict, allowed, name: str, val, key: str, errors: List[str]):
    if name not in allowed:
        errors.append(f"unknown config key {key!r}")
    else:
        target[name] = val


def parse_value(text: str):
    """Interpret a --set value as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    flat: Dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            flat = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(flat, dict):
            raise ConfigError(f"config file {path} must hold a JSON object of dotted keys")
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_flat(flat)
