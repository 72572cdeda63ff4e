"""Run configuration: an INI file with fixed sections and typed, defaulted keys."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .denoiser import DenoiserConfig, TrainConfig
from .schedule import NoiseSchedule, make_schedule


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class ModelSection:
    image_size: int = 64
    channels: tuple = (32, 64, 128, 128)
    res_blocks: int = 1
    time_dim: int = 64
    seed: int = 0
    prior_vertices: int = 1024
    prior_seed: int = 0

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(self.image_size, tuple(self.channels), self.res_blocks, self.time_dim, self.seed)


@dataclass
class TrainSection:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-4
    ema_decay: float = 0.999
    checkpoint_every: int = 500
    seed: int = 0

    def build(self) -> TrainConfig:
        return TrainConfig(self.steps, self.batch_size, self.lr, self.ema_decay, self.checkpoint_every, self.seed)


@dataclass
class DegradeSection:
    seed: int = 0


@dataclass
class RestoreSection:
    truncation: int = 100
    use_ema: bool = True
    restorer: str = "identity"
    restorer_dir: str = ""
    seed: int = 0


@dataclass
class PathsSection:
    hq_dir: str = ""
    coeff_file: str = ""
    prior_model: str = ""
    out_dir: str = "runs/train"


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    degrade: DegradeSection = field(default_factory=DegradeSection)
    restore: RestoreSection = field(default_factory=RestoreSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def serialize(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc
    return raw


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig()
    known = {f.name for f in fields(cfg)}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        obj = getattr(cfg, section)
        defaults = {f.name: getattr(obj, f.name) for f in fields(obj)}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(obj, key, _coerce(raw, defaults[key], f"[{section}] {key}"))
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())
