"""Run configuration: one TOML file with [env], [model], [train], [eval] and [io] sections."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .policy import ModelConfig
from .simulator import EnvironmentSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: list(range(1000, 1010)))
    n_sessions: int = 500
    ks: list[int] = field(default_factory=lambda: [3, 5, 10, 20, 50])
    levels: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one evaluation seed is required")
        if self.n_sessions < 1:
            raise ValueError("n_sessions must be positive")
        if any(k < 1 for k in self.ks):
            raise ValueError("every k must be >= 1")
        if any(not 1 <= lv <= 5 for lv in self.levels):
            raise ValueError("sweep levels must lie in 1..5")


@dataclass
class IOConfig:
    output_dir: str = "runs/default"


@dataclass
class RunConfig:
    env: EnvironmentSpec = field(default_factory=EnvironmentSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def to_dict(self) -> dict:
        out = {}
        for sec in SECTIONS:
            values = dataclasses.asdict(getattr(self, sec))
            out[sec] = {k: v for k, v in values.items() if v is not None}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())


SECTIONS = {"env": EnvironmentSpec, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig, "io": IOConfig}


def _coerce(value, annotation: str, path: str):
    ann = annotation.replace(" ", "")
    if ann.startswith("list") and not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
    if ann == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if ann == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if ann == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ann == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if ann == "list[int]":
        for i, v in enumerate(value):
            _coerce(v, "int", f"{path}[{i}]")
        return list(value)
    if ann.startswith("list|None") or ann.startswith("list"):
        # nested numeric rows (preference matrix)
        return [[_coerce(x, "float", f"{path}[{i}][{j}]") for j, x in enumerate(row)]
                if isinstance(row, list) else _coerce(row, "float", f"{path}[{i}]")
                for i, row in enumerate(value)]
    raise ConfigError(f"{path}: unsupported field type {annotation}")


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    sections = {}
    for name, cls in SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"{name}: expected a table")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in fields:
                raise ConfigError(f"{name}.{key}: unknown key")
            kwargs[key] = _coerce(value, str(fields[key].type), f"{name}.{key}")
        try:
            sections[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    try:
        sections["env"].validate()
    except ValueError as exc:
        raise ConfigError(f"env: {exc}") from exc
    if sections["model"].variant in ("kmeans", "proto") and sections["train"].init_sample < sections["model"].n_groups:
        raise ConfigError("train.init_sample: must be at least model.n_groups")
    return RunConfig(**sections)


def parse_toml(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(data)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_toml(text)
