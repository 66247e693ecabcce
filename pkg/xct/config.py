# xct/config.py

"""
Run configuration.

Every hyperparameter lives in one frozen dataclass tree rooted at
``TrainConfig``. JSON files may be partial; whatever they omit comes from the
defaults below, and ``to_json`` always writes the full tree back out.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any
from typing_extensions import Self

from xct.errors import ConfigError

_PRECISIONS = ("float32", "float64")


class ClassifierProtocol(Enum):
    true_volumes = "true"
    generated = "generated"


def _non_negative(owner: str, **values: float):
    for name, value in values.items():
        if not math.isfinite(value) or value < 0:
            raise ConfigError(f"{owner}.{name} must be a finite value >= 0, got {value}")


def _positive_int(owner: str, **values: int):
    for name, value in values.items():
        if value < 1:
            raise ConfigError(f"{owner}.{name} must be >= 1, got {value}")


def _fraction(owner: str, name: str, value: float):
    if not 0 <= value < 1:
        raise ConfigError(f"{owner}.{name} must lie in [0, 1), got {value}")


# ----------------------------
# Sections
# ----------------------------


@dataclass(frozen=True, kw_only=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.1
    lambda4: float = 10.0

    def __post_init__(self):
        _non_negative(
            "weights",
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            lambda4=self.lambda4,
        )


@dataclass(frozen=True, kw_only=True)
class ModelConfig:
    # generator encoder widths, one per stride-2 stage
    encoder_channels: tuple[int, int, int] = (16, 32, 64)
    # discriminator trunk widths, one per stride-2 block
    discriminator_channels: tuple[int, int, int] = (8, 16, 32)
    leaky_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "discriminator_channels", tuple(self.discriminator_channels))

        if len(self.encoder_channels) != 3:
            raise ConfigError(f"model.encoder_channels needs 3 widths, got {self.encoder_channels}")
        if not 2 <= len(self.discriminator_channels) <= 4:
            raise ConfigError(
                f"model.discriminator_channels needs 2 to 4 widths, got {self.discriminator_channels}"
            )
        if min(self.encoder_channels + self.discriminator_channels) < 1:
            raise ConfigError("model channel widths must be >= 1")
        _non_negative("model", leaky_slope=self.leaky_slope)


@dataclass(frozen=True, kw_only=True)
class ClassifierConfig:
    channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    hidden: int = 512
    dropout: float = 0.3
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 8
    validation_fraction: float = 0.1
    # smallest per-class count train_classifier accepts
    min_per_class: int = 30
    protocol: ClassifierProtocol | str = ClassifierProtocol.true_volumes
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if isinstance(self.protocol, str):
            try:
                object.__setattr__(self, "protocol", ClassifierProtocol(self.protocol))
            except ValueError as e:
                raise ConfigError(
                    f"Invalid classifier protocol: {self.protocol!r}. "
                    f"Valid values: {[p.value for p in ClassifierProtocol]}"
                ) from e

        if len(self.channels) != 4:
            raise ConfigError(f"classifier.channels needs 4 widths, got {self.channels}")
        _positive_int(
            "classifier",
            hidden=self.hidden,
            batch_size=self.batch_size,
            min_per_class=self.min_per_class,
            min_channels=min(self.channels),
        )
        _non_negative("classifier", epochs=self.epochs, lr=self.lr)
        _fraction("classifier", "dropout", self.dropout)
        _fraction("classifier", "validation_fraction", self.validation_fraction)


@dataclass(frozen=True, kw_only=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    pretrain_epochs: int = 30
    finetune_epochs: int = 10
    baseline_epochs: int = 40
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 4
    seed: int = 0
    volume_side: int = 32
    precision: str = "float32"
    include_lsgan_on_unpaired: bool = False
    validation_fraction: float = 0.1
    lambda4_grid: tuple[float, ...] = (0.0, 0.1, 1.0, 10.0, 100.0)
    model: ModelConfig = field(default_factory=ModelConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        object.__setattr__(self, "lambda4_grid", tuple(float(v) for v in self.lambda4_grid))

        _non_negative(
            "train",
            pretrain_epochs=self.pretrain_epochs,
            finetune_epochs=self.finetune_epochs,
            baseline_epochs=self.baseline_epochs,
            lr_g=self.lr_g,
            lr_d=self.lr_d,
        )
        _positive_int("train", batch_size=self.batch_size)

        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError(f"train.adam_betas must be two values in [0, 1), got {self.adam_betas}")
        _fraction("train", "validation_fraction", self.validation_fraction)

        # four stride-2 classifier stages and three generator stages
        if self.volume_side < 16 or self.volume_side % 16:
            raise ConfigError(
                f"Invalid volume_side: {self.volume_side}. Valid values: multiples of 16 (16, 32, 48, ...)"
            )
        if self.precision not in _PRECISIONS:
            raise ConfigError(
                f"Invalid precision: {self.precision!r}. Valid values: {list(_PRECISIONS)}"
            )
        if len(set(self.lambda4_grid)) != len(self.lambda4_grid):
            raise ConfigError(f"train.lambda4_grid values must be distinct, got {self.lambda4_grid}")
        _non_negative("train", **{f"lambda4_grid[{i}]": v for i, v in enumerate(self.lambda4_grid)})

    # ----------------------------
    # JSON
    # ----------------------------

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["classifier"]["protocol"] = self.classifier.protocol.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Self:
        if not isinstance(data, dict):
            raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")

        nested = {"weights": LossWeights, "model": ModelConfig, "classifier": ClassifierConfig}
        kwargs = _known_keys(cls, data, "train")
        try:
            for key, section in nested.items():
                if key in kwargs:
                    kwargs[key] = section(**_known_keys(section, kwargs[key], key))
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"invalid config value: {e}") from e

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Self:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> Self:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def with_lambda4(self, lambda4: float) -> Self:
        return replace(self, weights=replace(self.weights, lambda4=lambda4))


def _known_keys(section: type, data: Any, owner: str) -> dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigError(f"config section {owner!r} must be an object")

    known = {f.name for f in fields(section)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {owner!r}: {unknown}. Valid keys: {sorted(known)}")
    return dict(data)


def canonical_json(data: Any) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(config: TrainConfig) -> str:
    """SHA-256 of the canonical JSON encoding of the full config."""
    return hashlib.sha256(canonical_json(config.to_dict())).hexdigest()
