"""Harness configuration: one JSON document, unknown keys rejected.

Paths may be overridden from the environment (``PSEUDOLABEL_DATASET``,
``PSEUDOLABEL_IMAGES``, ``PSEUDOLABEL_OUT``); nothing else is.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass
from typing import Optional

from .ompl import MixConfig
from .reliability import ReliabilityConfig
from .synthetic import NoiseModel
from .teacher_student import EngineConfig
from .views import AugmentationPolicy, ViewSpec

ENV_PATHS = {"dataset": "PSEUDOLABEL_DATASET", "images": "PSEUDOLABEL_IMAGES",
             "out": "PSEUDOLABEL_OUT"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    dataset: Optional[str] = None
    images: Optional[str] = None
    out: str = "out"


@dataclass(frozen=True)
class LossConfig:
    lambda_u: float = 1.0
    assign_min_iou: float = 0.5

    def __post_init__(self):
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be nonnegative")
        if not 0.0 <= self.assign_min_iou <= 1.0:
            raise ValueError("assign_min_iou must lie in [0, 1]")


@dataclass(frozen=True)
class SplitConfig:
    labeled_fraction: float = 0.05
    stratify_by_class: bool = False


@dataclass(frozen=True)
class SimulateConfig:
    n_images: int = 100
    width: int = 128
    height: int = 128
    num_classes: int = 4
    iterations: int = 10
    labeled_batch_size: int = 2
    param_dim: int = 8
    sweep_thresholds: tuple = (0.5, 0.525, 0.55, 0.575, 0.6, 0.625, 0.65, 0.675,
                               0.7, 0.725, 0.75, 0.775, 0.8, 0.825)
    figures: bool = True

    def __post_init__(self):
        if self.n_images < 2:
            raise ValueError("n_images must be at least 2")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")


@dataclass(frozen=True)
class HarnessConfig:
    paths: PathsConfig = PathsConfig()
    reliability: ReliabilityConfig = ReliabilityConfig()
    mix: MixConfig = MixConfig()
    noise: NoiseModel = NoiseModel(jitter_sigma=2.0, class_flip_prob=0.1,
                                   false_positive_rate=1.0, base_confidence=0.9,
                                   confidence_sigma=0.05)
    augment: AugmentationPolicy = AugmentationPolicy()
    loss: LossConfig = LossConfig()
    split: SplitConfig = SplitConfig()
    simulate: SimulateConfig = SimulateConfig()
    ema_momentum: float = 0.999
    seed: int = 0
    batch_size: int = 4
    iou_thresh: float = 0.5
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")

    def engine(self) -> EngineConfig:
        mix = dataclasses.replace(self.mix, gamma_hat=self.reliability.gamma_hat)
        return EngineConfig(self.reliability, mix, self.augment, self.loss.lambda_u,
                            self.loss.assign_min_iou, self.ema_momentum,
                            self.interpolation)


# element types of tuple fields holding dataclasses
_ELEMENTS = {(ReliabilityConfig, "views"): ViewSpec}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        sub = f"{where}.{name}" if where else name
        elem = _ELEMENTS.get((cls, name))
        if dataclasses.is_dataclass(hint) and isinstance(hint, type):
            kwargs[name] = _build(hint, value, sub)
        elif elem is not None:
            kwargs[name] = tuple(_build(elem, v, sub) for v in value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def from_dict(data: dict) -> HarnessConfig:
    return _build(HarnessConfig, data, "")


def to_dict(cfg: HarnessConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path: Optional[str] = None, env=None) -> HarnessConfig:
    data = {}
    if path:
        with open(path) as fh:
            data = json.load(fh)
    cfg = from_dict(data)
    env = os.environ if env is None else env
    overrides = {k: env[v] for k, v in ENV_PATHS.items() if env.get(v)}
    if overrides:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, **overrides))
    return cfg


def dump_config(cfg: HarnessConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
