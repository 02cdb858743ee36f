import json
import os
from enum import Enum
from typing import Dict
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Type
from typing import TypeVar

import numpy as np
from attr import asdict
from attr import attrib
from attr import dataclass
from attr import evolve
from attr import fields

from pyscarf.constants import CombineMode
from pyscarf.constants import Difficulty
from pyscarf.constants import FusionKind
from pyscarf.exceptions import ConfigError

T = TypeVar("T", bound="BaseModel")


def _serialize(inst, field, value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [list(v) if isinstance(v, tuple) else v for v in value]
    return value


class BaseModel:
    """Pyscarf Base Model, a json friendly attrs value."""

    def to_dict(self) -> Dict:
        """
        Convert our object to a plain dictionary, enums by value and tuples
        as lists so that the result is json serializable.

        :rtype: Dict
        """
        return asdict(self, value_serializer=_serialize)

    @classmethod
    def from_dict(cls: Type[T], data: Dict) -> T:
        """
        Construct a BaseModel from a dictionary based on the class fields type
        annotations. Unknown keys are rejected, enums and nested models are
        rebuilt from their plain values.

        :param data: The plain dictionary
        :rtype: :class:`~pyscarf.models.common.BaseModel`
        :raise: :class:`~pyscarf.exceptions.ConfigError`
        """
        data = dict(data)
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(
                f"Unknown {cls.__name__} keys: {', '.join(unknown)}", unknown
            )

        for f in fields(cls):
            if f.name not in data or data[f.name] is None:
                continue

            value = data[f.name]
            kind = f.type
            try:
                if isinstance(kind, type) and issubclass(kind, Enum):
                    data[f.name] = kind(value)
                elif isinstance(kind, type) and issubclass(kind, BaseModel):
                    data[f.name] = kind.from_dict(value)
                elif kind == int or kind == Optional[int]:
                    data[f.name] = int(value)
                elif kind == float or kind == Optional[float]:
                    data[f.name] = float(value)
                elif kind == bool and not isinstance(value, bool):
                    raise TypeError(f"Expected a boolean, got {type(value).__name__}")
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Invalid value for {f.name}: {value!r}", [f.name]) from e

        return cls(**data)


@dataclass(auto_attribs=False)
class Config:
    """
    Pyscarf runtime settings.

    :param precision: Floating point width of every tensor, 32 or 64
    :param log_level: Logging level name used by the command line
    :param workers: Threads used by scene generation and evaluation
    """

    precision: int = attrib(converter=int)
    log_level: str = attrib(default="INFO")
    workers: int = attrib(default=1, converter=int)
    _instance: Optional["Config"] = None

    @precision.validator
    def _check_precision(self, attribute, value):
        if value not in (32, 64):
            raise ValueError("Precision must be 32 or 64.")

    def __attrs_post_init__(self):
        Config._instance = self

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @staticmethod
    def instance(
        precision: Optional[int] = None,
        log_level: Optional[str] = None,
        workers: Optional[int] = None,
    ) -> "Config":
        """Get/Create a config instance, settings that are not given are read
        from the environmental variables or fall back to their defaults."""

        given = {"precision": precision, "log_level": log_level, "workers": workers}
        if Config._instance is None or any(v is not None for v in given.values()):
            defaults = {"precision": "32", "log_level": "INFO", "workers": "1"}
            params = {
                k: v
                if v is not None
                else os.getenv(f"PYSCARF_{k.upper()}", defaults[k])
                for k, v in given.items()
            }
            Config(**params)
        return Config._instance

    def to_dict(self):
        return asdict(self)


def _schedule(value) -> Optional[Tuple[Tuple[int, float], ...]]:
    if value is None:
        return None
    return tuple((int(bound), float(lr)) for bound, lr in value)


@dataclass
class SgdConfig(BaseModel):
    """
    Stochastic gradient descent settings.

    :param lr_schedule: Pairs of (iteration bound, learning rate), the rate
        applies to iterations below its bound. None lets the owning
        :class:`TrainConfig` derive the three phase schedule from its
        iterations
    :param momentum: Velocity decay
    :param weight_decay: L2 penalty added to every gradient
    :param batch_size: Scenes per iteration
    """

    lr_schedule: Optional[Tuple[Tuple[int, float], ...]] = attrib(
        default=None, converter=_schedule
    )
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8

    def __attrs_post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("Batch size must be positive.", ["batch_size"])
        if self.lr_schedule is None:
            return
        if not self.lr_schedule:
            raise ConfigError("The learning rate schedule is empty.", ["lr_schedule"])

        bounds = [bound for bound, _ in self.lr_schedule]
        if any(b >= a for b, a in zip(bounds, bounds[1:])) or bounds[0] <= 0:
            raise ConfigError(
                "Schedule bounds must be positive and strictly increasing.",
                ["lr_schedule"],
            )
        if any(lr <= 0 for _, lr in self.lr_schedule):
            raise ConfigError("Learning rates must be positive.", ["lr_schedule"])

    def lr_at(self, iteration: int) -> float:
        """Learning rate for the given iteration, the last phase extends to
        infinity."""
        if self.lr_schedule is None:
            raise ConfigError("No learning rate schedule.", ["lr_schedule"])
        for bound, lr in self.lr_schedule:
            if iteration < bound:
                return lr
        return self.lr_schedule[-1][1]

    @classmethod
    def desk(cls, iterations: int, base_lr: float = 1e-2, **kwargs) -> "SgdConfig":
        """Three phase schedule, 60% at base_lr and two tenfold decays."""
        first = max(1, int(iterations * 0.6))
        second = max(first + 1, int(iterations * 0.9))
        third = max(second + 1, iterations)
        rates = [float(f"{base_lr / 10 ** p:.12g}") for p in range(3)]
        schedule = tuple(zip((first, second, third), rates))
        return cls(lr_schedule=schedule, **kwargs)


def _ints(value: Sequence) -> Tuple[int, ...]:
    return tuple(int(v) for v in value)


@dataclass
class TrainConfig(BaseModel):
    """
    Experiment settings for one training run.

    :param fusion: Feature fusion applied between backbone and heads
    :param k: Number of pyramid levels read by the detector
    :param channels: Backbone channels of the k detection levels
    :param input_size: Square scene side in pixels
    :param d: ScNet channel dimension
    :param d_out: ArNet output channels, None matches every level's C_l
    :param combine: How redistributed features join the pyramid
    :param attention: Channel attention on/off
    :param reduction: SE block reduction ratio
    :param per_level_attention: One SE block per output level
    :param num_classes: Object classes, background excluded
    :param anchor_scale: Anchor base size as a multiple of the level stride
    :param sgd: Optimizer settings, without a schedule one is derived from
        the iterations: 60% at 1e-2, 30% at 1e-3 and 10% at 1e-4
    :param iterations: Training iterations
    :param seed: Parameter and batch sampling seed
    :param data_seed: Seed of the generated train/eval scenes
    :param difficulty: Generated scene difficulty
    :param train_size: Generated train scenes
    :param eval_size: Generated eval scenes
    :param train_dir: Load train scenes from this directory instead
    :param eval_dir: Load eval scenes from this directory instead
    :param eval_interval: Iterations between mAP evaluations, 0 disables
    :param log_path: Metrics log destination (json lines)
    """

    fusion: FusionKind = FusionKind.scarf_full
    k: int = 3
    channels: Tuple[int, ...] = attrib(default=(32, 64, 128), converter=_ints)
    input_size: int = 64
    d: int = 32
    d_out: Optional[int] = None
    combine: CombineMode = CombineMode.concat
    attention: bool = True
    reduction: int = 4
    per_level_attention: bool = False
    num_classes: int = 3
    anchor_scale: float = 4.0
    sgd: SgdConfig = attrib(factory=SgdConfig)
    iterations: int = 2000
    seed: int = 0
    data_seed: int = 1000
    difficulty: Difficulty = Difficulty.hard
    train_size: int = 800
    eval_size: int = 200
    train_dir: Optional[str] = None
    eval_dir: Optional[str] = None
    eval_interval: int = 500
    log_path: Optional[str] = None

    def __attrs_post_init__(self):
        if self.iterations < 1:
            raise ConfigError("At least one iteration is required.", ["iterations"])
        if self.sgd.lr_schedule is None:
            derived = SgdConfig.desk(self.iterations).lr_schedule
            self.sgd = evolve(self.sgd, lr_schedule=derived)
        if self.k < 2:
            raise ConfigError("At least two pyramid levels are required.", ["k"])
        if len(self.channels) != self.k:
            raise ConfigError(
                f"Expected {self.k} channel entries, got {len(self.channels)}.",
                ["channels"],
            )
        if self.combine == CombineMode.add and self.d_out is not None:
            if any(c != self.d_out for c in self.channels):
                raise ConfigError(
                    "Element-wise addition needs d_out equal to every level's channels.",
                    ["d_out", "combine"],
                )

    @property
    def derived_schedule(self) -> bool:
        return self.sgd.lr_schedule == SgdConfig.desk(self.iterations).lr_schedule

    @property
    def level_out_channels(self) -> Tuple[int, ...]:
        return self.channels if self.d_out is None else (self.d_out,) * self.k

    def replace(self, **changes) -> "TrainConfig":
        """
        Copy with the given fields changed. A schedule derived from the old
        iterations is derived again when only the iterations change.
        """
        if "iterations" in changes and "sgd" not in changes and self.derived_schedule:
            changes["sgd"] = evolve(self.sgd, lr_schedule=None)
        return evolve(self, **changes)

    def dump(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "TrainConfig":
        """
        Read a UTF-8 json config file.

        :param path: The file path
        :rtype: :class:`~pyscarf.models.common.TrainConfig`
        :raise: :class:`~pyscarf.exceptions.ConfigError`
        """
        with open(path, encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Invalid config file {path}: {e}") from e

        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a json object.")
        return cls.from_dict(data)
