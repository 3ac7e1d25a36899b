"""Run configuration: one JSON document holding every schedule, model, training, sampling and
benchmark parameter, with pinned defaults and strict key checking."""
import dataclasses
import json
import os
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from bench import BenchConfig
from constants import ALPHA_END, ALPHA_START, DEFAULT_BRACKET_SCHEDULE, DESK_PATCH, NUM_STEPS, SCHEMA_VERSION
from errors import ConfigError
from schedules import NoiseSchedule, PyramidSchedule, SamplerConfig, build_linear_noise_schedule, schedule_from_bracket
from training import ModelConfig, PairSampler, TrainConfig

CONFIG_FILE: str = "config.json"

@dataclasses.dataclass(frozen=True)
class ScheduleConfig:
    num_steps: int = NUM_STEPS
    alpha_start: float = ALPHA_START
    alpha_end: float = ALPHA_END
    bracket: str = DEFAULT_BRACKET_SCHEDULE

    def noise_schedule(self) -> NoiseSchedule:
        return build_linear_noise_schedule(self.num_steps, self.alpha_start, self.alpha_end)

    def pyramid_schedule(self, base_resolution: Optional[Tuple[int, int]]=None, bracket: Optional[str]=None) -> PyramidSchedule:
        return schedule_from_bracket(self.num_steps, bracket if bracket is not None else self.bracket, base_resolution)

@dataclasses.dataclass(frozen=True)
class DataConfig:
    folder: Optional[str] = None
    num_pairs: int = 64
    height: int = DESK_PATCH[0]
    width: int = DESK_PATCH[1]
    illumination: Tuple[float, float] = (0.05, 0.3)
    noise: Tuple[float, float] = (0.02, 0.08)
    validation_pairs: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_pairs < 0 or self.validation_pairs < 0:
            raise ConfigError(f"pair counts must be non-negative, got num_pairs={self.num_pairs}, validation_pairs={self.validation_pairs}")

    def sampler(self, height: Optional[int]=None, width: Optional[int]=None) -> PairSampler:
        return PairSampler(height or self.height, width or self.width, self.illumination, self.noise)

@dataclasses.dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    schedule: ScheduleConfig = ScheduleConfig()
    sampler: SamplerConfig = SamplerConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    bench: BenchConfig = BenchConfig()
    data: DataConfig = DataConfig()

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        return _build(cls, raw, "config")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw: Any = json.loads(text)
        except json.JSONDecodeError as error:
            raise ConfigError(f"config is not valid JSON: {error}") from error
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: os.PathLike) -> "RunConfig":
        with open(path) as handle:
            return cls.from_json(handle.read())

    def save(self, path: os.PathLike) -> None:
        with open(path, "w") as handle:
            handle.write(self.to_json() + "\n")

    def echo(self, directory: os.PathLike) -> os.PathLike:
        path: os.PathLike = os.path.join(directory, CONFIG_FILE)
        self.save(path)
        return path

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, sampler=dataclasses.replace(self.sampler, seed=seed), model=dataclasses.replace(self.model, seed=seed),
                                   train=dataclasses.replace(self.train, seed=seed), bench=dataclasses.replace(self.bench, seed=seed),
                                   data=dataclasses.replace(self.data, seed=seed))

T = TypeVar("T")

def _as_tuples(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return tuple(_as_tuples(v) for v in value)
    return value

def _build(cls: Type[T], raw: Any, path: str) -> T:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be a JSON object, got: {type(raw).__name__}")
    fields: Dict[str, dataclasses.Field] = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {unknown}")

    defaults = cls()
    values: Dict[str, Any] = {}
    for name, value in raw.items():
        default: Any = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            values[name] = _build(type(default), value, f"{path}.{name}")
        elif isinstance(default, tuple):
            values[name] = _as_tuples(value)
        else:
            values[name] = value
    try:
        return cls(**values)
    except TypeError as error:
        raise ConfigError(f"bad value in {path}: {error}") from error
