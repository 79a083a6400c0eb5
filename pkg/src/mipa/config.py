"""Experiment configuration: JSON schema, dotted overrides and validation."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Optional

from .encoder import EncoderConfig
from .rho import RhoPolicy

REGIMES = ("rgb_only", "ir_only", "both", "mipa", "mipa_ma")
SCHEDULES = ("constant", "cosine")


class ConfigError(ValueError):
    pass


@dataclass
class MaConfig:
    gamma: Optional[float] = None
    force_lambda: Optional[float] = None  # pins lambda for every step (ablation/debug)


@dataclass
class DetConfig:
    lambda_reg: float = 1.0
    score_threshold: float = 0.3


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 1e-4
    schedule: str = "constant"


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    synthetic: dict = field(default_factory=dict)  # SceneSpec fields
    train_size: int = 2000
    test_size: int = 500
    test_offset: int = 1_000_000  # scene index offset keeping test scenes disjoint from training
    root: Optional[str] = None
    train_annotations: Optional[str] = None
    test_annotations: Optional[str] = None
    pairing_rule: list = field(default_factory=lambda: ["visible", "infrared"])
    image_size: list = field(default_factory=lambda: [512, 640])


@dataclass
class ExperimentConfig:
    regime: str = "mipa"
    rho_policy: dict = field(default_factory=lambda: {"kind": "variable"})
    both_rho: Optional[float] = None
    ma: MaConfig = field(default_factory=MaConfig)
    det: DetConfig = field(default_factory=DetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 6
    epochs: int = 12
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    log_every: int = 10
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if (self.ma.gamma is not None) != (self.regime == "mipa_ma"):
            raise ConfigError("ma.gamma must be set exactly when regime is mipa_ma "
                              f"(regime={self.regime!r}, ma.gamma={self.ma.gamma})")
        if self.regime == "mipa_ma" and not self.ma.gamma > 0:
            raise ConfigError(f"ma.gamma must be > 0, got {self.ma.gamma}")
        if self.ma.force_lambda is not None and self.regime != "mipa_ma":
            raise ConfigError("ma.force_lambda only applies to regime mipa_ma")
        if (self.both_rho is not None) != (self.regime == "both"):
            raise ConfigError("both_rho must be set exactly when regime is both "
                              f"(regime={self.regime!r}, both_rho={self.both_rho})")
        if self.both_rho is not None and not 0.0 <= self.both_rho <= 1.0:
            raise ConfigError(f"both_rho must lie in [0, 1], got {self.both_rho}")
        try:
            RhoPolicy.from_dict(self.rho_policy)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid rho_policy {self.rho_policy}: {exc}") from exc
        if not self.optimizer.lr > 0:
            raise ConfigError(f"optimizer.lr must be > 0, got {self.optimizer.lr}")
        if self.optimizer.name.lower() != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer.name!r}")
        if self.optimizer.schedule not in SCHEDULES:
            raise ConfigError(f"optimizer.schedule must be one of {SCHEDULES}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dataset.kind not in ("synthetic", "coco"):
            raise ConfigError(f"dataset.kind must be synthetic or coco, got {self.dataset.kind!r}")
        if self.dataset.kind == "coco" and not (self.dataset.root and self.dataset.train_annotations):
            raise ConfigError("coco datasets need dataset.root and dataset.train_annotations")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        sections = {"ma": MaConfig, "det": DetConfig, "optimizer": OptimizerConfig,
                    "dataset": DatasetConfig, "encoder": EncoderConfig}
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                section = sections[key]
                bad = set(value) - set(section.__dataclass_fields__)
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                try:
                    value = section(**value)
                except ValueError as exc:
                    raise ConfigError(f"invalid {key} section: {exc}") from exc
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def with_overrides(self, overrides) -> "ExperimentConfig":
        return self.from_dict(apply_overrides(self.to_dict(), overrides))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``{"a.b": value}`` or ``["a.b=value", ...]`` to a nested config dict."""
    data = copy.deepcopy(data)
    if isinstance(overrides, dict):
        items = list(overrides.items())
    else:
        items = []
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            items.append((key.strip(), parse_value(raw)))
    for key, value in items:
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override path {key!r} does not exist")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override path {key!r} does not exist")
        node[parts[-1]] = copy.deepcopy(value)
    return data


def bundled_config(name: str) -> dict:
    """Load one of the JSON configs shipped in ``mipa/configs``."""
    text = resources.files("mipa").joinpath("configs", f"{name}.json").read_text()
    return json.loads(text)
