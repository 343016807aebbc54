"""Run configuration: one canonical JSON document for every CLI command."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .sampler import CfgConfig, StreamSchedule
from .synth import TaskSpec, make_task
from .train import TrainConfig

__all__ = ["ConfigError", "TaskParams", "DataParams", "SamplerParams", "EvalParams", "PathParams",
           "RunConfig", "canonical_json"]


class ConfigError(ValueError):
    """Raised with every violation found, one per line in ``errors``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def canonical_json(obj) -> bytes:
    """UTF-8, sorted keys, no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


@dataclass(frozen=True)
class TaskParams:
    seed: int = 0
    vocab_size: int = 16
    latent_dim: int = 16
    frames_per_token: int = 8
    ar_coeff: float = 0.8
    noise_scale: float = 0.05
    mode_offset: float = 0.5

    def build(self) -> TaskSpec:
        return make_task(**dataclasses.asdict(self))


@dataclass(frozen=True)
class DataParams:
    count: int = 1000
    seed: int = 0
    min_tokens: int = 3
    max_tokens: int = 6

    def validation_errors(self):
        errors = []
        if self.count < 1:
            errors.append("data.count must be >= 1")
        if not (1 <= self.min_tokens <= self.max_tokens):
            errors.append("data.min_tokens must satisfy 1 <= min_tokens <= max_tokens")
        return errors


@dataclass(frozen=True)
class SamplerParams:
    lam: float = 2.0
    stop_threshold: float = 0.5
    max_frames: int = 400
    stop_on: str = "conditional"
    schedule: str = "5:20"

    def cfg(self) -> CfgConfig:
        return CfgConfig(self.lam, self.stop_threshold, self.max_frames, self.stop_on)

    def stream_schedule(self) -> StreamSchedule:
        return StreamSchedule.parse(self.schedule)

    def validation_errors(self):
        errors = CfgConfig.validation_errors(self)
        try:
            self.stream_schedule()
        except ValueError:
            errors.append(f"sampler.schedule must look like 'n:m' with positive integers, got {self.schedule!r}")
        return errors


@dataclass(frozen=True)
class EvalParams:
    prompts: int = 32
    seed: int = 1
    lams: tuple = (1.0, 2.0)
    positions: tuple = (0, 5, 16, 21)
    samples_per_step: int = 256

    def validation_errors(self):
        errors = []
        if self.prompts < 1:
            errors.append("eval.prompts must be >= 1")
        if not self.lams:
            errors.append("eval.lams must be non-empty")
        if any(p < 0 for p in self.positions):
            errors.append("eval.positions must be non-negative")
        if self.samples_per_step < 2:
            errors.append("eval.samples_per_step must be >= 2")
        return errors


@dataclass(frozen=True)
class PathParams:
    data_dir: str | None = None
    checkpoint: str | None = None

    def validation_errors(self):
        return []


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "task": TaskParams,
    "data": DataParams,
    "sampler": SamplerParams,
    "eval": EvalParams,
    "paths": PathParams,
}


def _check_type(section: str, f: dataclasses.Field, value, errors) -> object:
    name = f"{section}.{f.name}"
    default = f.default
    if default is None:
        if value is not None and not isinstance(value, str):
            errors.append(f"{name} must be a string or null")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        if ok:
            kind = type(default[0]) if default else float
            value = tuple(kind(v) for v in value)
    else:
        ok = True
    if not ok:
        errors.append(f"{name} has the wrong type ({type(value).__name__}; expected {type(default).__name__})")
    return value


def _build_section(name: str, cls, data, errors):
    if not isinstance(data, dict):
        errors.append(f"{name} must be an object")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in sorted(set(data) - set(fields)):
        errors.append(f"unknown key {name}.{key}")
    kwargs = {}
    local = []
    for key in fields:
        if key in data:
            before = len(local)
            value = _check_type(name, fields[key], data[key], local)
            if len(local) == before:
                kwargs[key] = value
    errors.extend(local)
    try:
        obj = cls(**kwargs)
    except ValueError as exc:
        errors.extend(e if e.startswith(name) else f"{name}: {e}" for e in str(exc).split("; "))
        return cls()
    check = getattr(obj, "validation_errors", None)
    if check is not None and cls not in (ModelConfig, TrainConfig):
        errors.extend(check())
    return obj


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskParams = field(default_factory=TaskParams)
    data: DataParams = field(default_factory=DataParams)
    sampler: SamplerParams = field(default_factory=SamplerParams)
    eval: EvalParams = field(default_factory=EvalParams)
    paths: PathParams = field(default_factory=PathParams)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        errors: list[str] = []
        if not isinstance(data, dict):
            raise ConfigError(["config must be a JSON object"])
        for key in sorted(set(data) - set(_SECTIONS)):
            errors.append(f"unknown section {key}")
        sections = {name: _build_section(name, c, data.get(name, {}), errors) for name, c in _SECTIONS.items()}
        cfg = cls(**sections)
        if not errors:
            errors.extend(cfg.cross_errors())
        if errors:
            raise ConfigError(errors)
        return cfg

    def cross_errors(self) -> list[str]:
        errors = []
        if self.model.vocab_size != self.task.vocab_size + 1:
            errors.append(f"model.vocab_size must equal task.vocab_size + 1 (EOT), got "
                          f"{self.model.vocab_size} vs {self.task.vocab_size}")
        if self.model.latent_dim != self.task.latent_dim:
            errors.append("model.latent_dim must equal task.latent_dim")
        return errors

    @classmethod
    def from_json(cls, text: str | bytes) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON: {exc}"]) from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_bytes())

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json()).hexdigest()

    def replace(self, section: str, **changes) -> "RunConfig":
        """Copy with fields of one section overridden (validated again)."""
        data = self.to_dict()
        data[section].update(changes)
        return RunConfig.from_dict(data)

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_json() + b"\n")
