"""Run configuration shared by CLI subcommands, stored as JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ParameterError
from .lanczos import LanczosConfig
from .process import DiffusionProcess
from .schedules import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    NoiseSchedule,
    ResolutionSchedule,
    linear_beta_schedule,
    make_resolution_schedule,
    parse_schedule_spec,
)


@dataclass
class SyntheticData:
    n: int = 64
    channels: int = 3
    res: int = 8
    seed: int = 0


@dataclass
class TrainSettings:
    iters: int = 2000
    batch: int = 16
    lr: float = 1e-4
    hidden: int = 256


@dataclass
class RunConfig:
    schedule: str = "equal"
    levels: list[int] = field(default_factory=lambda: [4, 8])
    T: int = 1000
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    channels: int = 3
    seed: int = 0
    lanczos: LanczosConfig = field(default_factory=LanczosConfig)
    data_path: str | None = None
    synthetic: SyntheticData = field(default_factory=SyntheticData)
    train: TrainSettings = field(default_factory=TrainSettings)
    out_dir: str = "."

    def noise(self) -> NoiseSchedule:
        return linear_beta_schedule(self.T, self.beta_start, self.beta_end)

    def resolution(self) -> ResolutionSchedule:
        kind, gamma = parse_schedule_spec(self.schedule)
        return make_resolution_schedule(kind, gamma, self.levels, self.T)

    def process(self, channels: int | None = None) -> DiffusionProcess:
        return DiffusionProcess(self.noise(), self.resolution(), channels or self.channels, self.lanczos)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_NESTED = {"lanczos": LanczosConfig, "synthetic": SyntheticData, "train": TrainSettings}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ParameterError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ParameterError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ParameterError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ParameterError("config must be a JSON object")
    data = dict(data)
    for key, cls in _NESTED.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    cfg = _build(RunConfig, data, "config")
    if not isinstance(cfg.levels, list) or not all(isinstance(r, int) for r in cfg.levels):
        raise ParameterError("levels must be a list of integers")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def merge_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply non-``None`` overrides on top of ``cfg`` (CLI flags beat the file)."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(cfg, **changes)
