"""Training/evaluation configuration and the flat JSON run-config file.

The run-config file is a single JSON object whose keys are listed in
:data:`RUN_CONFIG_KEYS`; every key has a default and unknown keys are rejected.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Tuple

from .geometry import TransformKind
from .hough import HoughConfig
from .losses import LossWeights
from .networks import GeneratorSpec


class Ablation(str, Enum):
    G_ONLY = "G_only"
    G_S = "G_S"
    G_S_HT = "G_S_HT"
    FULL = "full"

    @classmethod
    def parse(cls, value: "Ablation | str") -> "Ablation":
        if isinstance(value, cls):
            return value
        return cls("G_only" if value == "G" else value)

    @property
    def uses_semantic_decoder(self) -> bool:
        return self is not Ablation.G_ONLY

    @property
    def uses_hough(self) -> bool:
        return self in (Ablation.G_S_HT, Ablation.FULL)

    @property
    def uses_transformed_branch(self) -> bool:
        return self is Ablation.FULL


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr0: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    image_size: int = 512
    weights: LossWeights = field(default_factory=LossWeights)
    hough: HoughConfig = field(default_factory=HoughConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    transform: TransformKind = TransformKind.ROT90CW
    seed: int = 0
    ablation: Ablation = Ablation.FULL
    checkpoint_every: int = 10
    init: str = "normal"
    augment_flips: bool = False

    def __post_init__(self):
        object.__setattr__(self, "transform", TransformKind(self.transform))
        object.__setattr__(self, "ablation", Ablation.parse(self.ablation))
        if self.epochs < 2 or self.epochs % 2:
            raise ValueError(f"epochs must be a positive even number, got {self.epochs}")
        if not (self.lr0 > 0 and math.isfinite(self.lr0)):
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.image_size % self.generator.stride:
            raise ValueError(f"image_size {self.image_size} not divisible by {self.generator.stride}")
        if self.init not in ("normal", "xavier"):
            raise ValueError(f"init must be 'normal' or 'xavier', got {self.init!r}")

    @property
    def effective_weights(self) -> LossWeights:
        """Loss weights with the terms disabled by the ablation variant zeroed."""
        w = self.weights
        return LossWeights(
            lambda_spl=w.lambda_spl,
            lambda_ht=w.lambda_ht if self.ablation.uses_hough else 0.0,
            lambda_geo=w.lambda_geo if self.ablation.uses_transformed_branch else 0.0,
        )


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    tolerance: float = 2.0
    beta: float = 0.3
    aggregation: str = "micro"
    distance: str = "euclidean"


# key -> (section, attribute, python type, doc)
RUN_CONFIG_KEYS: Dict[str, Tuple[str, str, type, str]] = {
    "epochs": ("train", "epochs", int, "training epochs (even; lr decays linearly over the second half)"),
    "lr0": ("train", "lr0", float, "initial Adam learning rate"),
    "adam_beta1": ("train", "adam_beta1", float, "Adam first-moment decay"),
    "adam_beta2": ("train", "adam_beta2", float, "Adam second-moment decay"),
    "batch_size": ("train", "batch_size", int, "samples per step"),
    "image_size": ("train", "image_size", int, "square training resolution"),
    "seed": ("train", "seed", int, "seed for init and batch order"),
    "ablation": ("train", "ablation", str, "G_only | G_S | G_S_HT | full"),
    "transform": ("train", "transform", str, "geometry transform for the transformed branch"),
    "checkpoint_every": ("train", "checkpoint_every", int, "epochs between intermediate checkpoints (0 = final only)"),
    "init": ("train", "init", str, "normal | xavier weight init"),
    "augment_flips": ("train", "augment_flips", bool, "add horizontally/vertically flipped copies of every sample"),
    "lambda_spl": ("weights", "lambda_spl", float, "semantic loss weight"),
    "lambda_ht": ("weights", "lambda_ht", float, "Hough loss weight"),
    "lambda_geo": ("weights", "lambda_geo", float, "geometry loss weight"),
    "hough_m": ("hough", "M", int, "number of Hough angle bins"),
    "hough_theta_max": ("hough", "theta_max", float, "largest Hough angle (radians, exclusive)"),
    "hough_coord_mode": ("hough", "coord_mode", str, "raw | centered_normalized"),
    "hough_variant": ("hough", "variant", str, "per_pixel | accumulator"),
    "base_width": ("generator", "base_width", int, "generator base channel width"),
    "n_downsamples": ("generator", "n_downsamples", int, "generator stride-2 stages"),
    "n_resblocks": ("generator", "n_resblocks", int, "generator residual blocks"),
    "threshold": ("eval", "threshold", float, "probability threshold for binarisation"),
    "tolerance": ("eval", "tolerance", float, "relaxation distance in pixels"),
    "beta": ("eval", "beta", float, "F-beta weight"),
    "aggregation": ("eval", "aggregation", str, "micro | macro"),
    "distance": ("eval", "distance", str, "euclidean | chebyshev"),
}


class ConfigError(ValueError):
    pass


def _plain(v: Any) -> Any:
    return v.value if isinstance(v, Enum) else v


def to_flat(train: TrainConfig = TrainConfig(), ev: EvalConfig = EvalConfig()) -> Dict[str, Any]:
    sections = {"train": train, "weights": train.weights, "hough": train.hough,
                "generator": train.generator, "eval": ev}
    return {key: _plain(getattr(sections[sec], attr)) for key, (sec, attr, _, _) in RUN_CONFIG_KEYS.items()}


def _coerce(key: str, value: Any, typ: type) -> Any:
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}") from None


def from_flat(values: Dict[str, Any], base: Dict[str, Any] | None = None) -> Tuple[TrainConfig, EvalConfig]:
    unknown = sorted(set(values) - set(RUN_CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    flat = dict(base or to_flat())
    for k, v in values.items():
        flat[k] = _coerce(k, v, RUN_CONFIG_KEYS[k][2])
    parts: Dict[str, Dict[str, Any]] = {s: {} for s in ("train", "weights", "hough", "generator", "eval")}
    for key, (sec, attr, _, _) in RUN_CONFIG_KEYS.items():
        parts[sec][attr] = flat[key]
    try:
        train = TrainConfig(weights=LossWeights(**parts["weights"]), hough=HoughConfig(**parts["hough"]),
                            generator=GeneratorSpec(**parts["generator"]), **parts["train"])
        ev = EvalConfig(**parts["eval"])
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return train, ev


def load_run_config(path: str | Path) -> Tuple[TrainConfig, EvalConfig]:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return from_flat(values)


def dump_run_config(train: TrainConfig, ev: EvalConfig = EvalConfig()) -> str:
    return json.dumps(to_flat(train, ev), indent=2) + "\n"
