"""Run configuration: one YAML file drives every pipeline stage."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .control import PidState
from .datapipe import AugmentConfig, BalanceConfig, NoiseSchedule
from .evalbench import BenchmarkSpec
from .model import ModelConfig
from .simworld import AutopilotConfig, CameraConfig, TRAIN_WEATHERS
from .training import LossWeights, TrainConfig

CONFIG_ENV = "FUSIONDRIVE_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    dataset_dir: str = "runs/dataset"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"


@dataclass
class CollectConfig:
    town_id: str = "train_town"
    episodes: int = 20
    route_kinds: tuple[str, ...] = ("straight", "one_turn")
    weathers: tuple[str, ...] = TRAIN_WEATHERS
    n_vehicles: int = 0
    n_pedestrians: int = 0
    dt: float = 0.1
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)


@dataclass
class PidGains:
    kp: float = 1.0
    ki: float = 0.3
    kd: float = 0.02
    integral_limit: float = 1.0

    def state(self) -> PidState:
        return PidState(kp=self.kp, ki=self.ki, kd=self.kd, integral_limit=self.integral_limit)


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    camera: CameraConfig = field(default_factory=lambda: CameraConfig(image_width=160, image_height=120))
    collect: CollectConfig = field(default_factory=CollectConfig)
    autopilot: AutopilotConfig = field(default_factory=AutopilotConfig)
    pid: PidGains = field(default_factory=PidGains)
    balance: BalanceConfig = field(default_factory=BalanceConfig)
    val_fraction: float = 0.1
    model: ModelConfig = field(default_factory=lambda: ModelConfig(input_size=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    bench: BenchmarkSpec = field(default_factory=lambda: BenchmarkSpec(repetitions=1))

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return to_plain(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return from_plain(cls, d or {})

    def dump(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def ensure_dirs(self) -> None:
        for p in (self.paths.dataset_dir, self.paths.checkpoint_dir, self.paths.report_dir):
            Path(p).mkdir(parents=True, exist_ok=True)


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        if hasattr(obj, "to_dict") and not isinstance(obj, RunConfig):
            return to_plain(obj.to_dict())
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_plain(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = typing.get_args(tp)
        inner = args[0] if args else typing.Any
        return tuple(_coerce(inner, v, where) for v in value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_plain(cls, data, where: str = "config"):
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a YAML run config; falls back to the environment variable, then to defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return RunConfig.from_dict(data)

