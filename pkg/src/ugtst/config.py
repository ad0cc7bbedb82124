"""Flat key/value run configuration with strict key checking."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import AugmentationConfig
from .select import SelectionConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "master_seed": 0,
    "aug.k": 8,
    "aug.seed": None,
    "aug.gamma_range": [0.7, 1.5],
    "aug.contrast_range": [0.7, 1.3],
    "aug.noise_sigma_max": 0.05,
    "aug.blur_sigma_range": [0.5, 1.0],
    "unc.bins": 100,
    "unc.epsilon": 0.05,
    "select.budget_fraction": 0.05,
    "select.capacity_multiplier": 4,
    "select.strategy": "ugtst",
    "select.seed": None,
    "source.lr0": 0.01,
    "source.epochs": 30,
    "source.batch_size": 8,
    "source.momentum": 0.9,
    "source.seed": None,
    "stage1.lr0": 0.001,
    "stage1.epochs": 20,
    "stage1.batch_size": 8,
    "stage1.momentum": 0.9,
    "stage1.seed": None,
    "stage1.active_weight": 1.0,
    "stage2.lr0": 0.001,
    "stage2.epochs": 20,
    "stage2.batch_size": 8,
    "stage2.momentum": 0.9,
    "stage2.seed": None,
    "stage2.active_weight": 1.0,
    "eval.tta": True,
}

# stable offsets so each component draws an independent stream from master_seed
_SEED_OFFSETS = {"aug": 1, "select": 2, "source": 3, "stage1": 4, "stage2": 5}


def resolve(overrides: dict = None, seed: int = None) -> dict:
    """Merge overrides into the defaults, validate, and materialize derived seeds."""
    cfg = dict(DEFAULTS)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    if seed is not None:
        cfg["master_seed"] = int(seed)
    for key, default in DEFAULTS.items():
        value = cfg[key]
        if value is None or default is None:
            continue
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be numeric")
        elif isinstance(default, int) and not isinstance(default, bool) \
                and not float(value).is_integer():
            raise ConfigError(f"{key} must be an integer")
    for prefix, offset in _SEED_OFFSETS.items():
        if cfg[f"{prefix}.seed"] is None:
            ss = np.random.SeedSequence([int(cfg["master_seed"]), offset])
            cfg[f"{prefix}.seed"] = int(ss.generate_state(1, dtype=np.uint32)[0])
    try:
        aug_config(cfg)
        selection_config(cfg)
        for stage in ("source", "stage1", "stage2"):
            TrainConfig.from_config(cfg, stage)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load(path, seed: int = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return resolve(doc, seed)


def aug_config(cfg: dict) -> AugmentationConfig:
    return AugmentationConfig(
        k=int(cfg["aug.k"]),
        gamma_range=tuple(cfg["aug.gamma_range"]),
        contrast_range=tuple(cfg["aug.contrast_range"]),
        noise_sigma_max=float(cfg["aug.noise_sigma_max"]),
        blur_sigma_range=tuple(cfg["aug.blur_sigma_range"]),
    )


def selection_config(cfg: dict) -> SelectionConfig:
    return SelectionConfig(
        budget_fraction=float(cfg["select.budget_fraction"]),
        capacity_multiplier=int(cfg["select.capacity_multiplier"]),
        seed=int(cfg["select.seed"]),
        strategy=cfg["select.strategy"],
    )


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    epochs: int = 10
    batch_size: int = 8
    momentum: float = 0.9
    seed: int = 0
    active_weight: float = 1.0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @classmethod
    def from_config(cls, cfg: dict, stage: str) -> "TrainConfig":
        return cls(
            lr0=float(cfg[f"{stage}.lr0"]),
            epochs=int(cfg[f"{stage}.epochs"]),
            batch_size=int(cfg[f"{stage}.batch_size"]),
            momentum=float(cfg[f"{stage}.momentum"]),
            seed=int(cfg[f"{stage}.seed"]),
            active_weight=float(cfg.get(f"{stage}.active_weight", 1.0)),
        )

    def estimator_params(self) -> dict:
        return dict(lr0=self.lr0, epochs=self.epochs, batch_size=self.batch_size,
                    momentum=self.momentum, seed=self.seed)
