"""Run configuration: one JSON document covering every stage.

Loading is strict: unknown keys anywhere raise ``ConfigError`` so a typo in a
sweep script fails loudly instead of silently running defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import TrainConfig
from .errors import ConfigError
from .guidance import DiscConfig
from .reid import ReIDConfig
from .synthdata import DatasetSpec


@dataclass
class ScheduleConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.04
    kind: str = "linear"


@dataclass
class DenoiserConfig:
    hidden: tuple = (256, 256)
    time_dim: int = 32
    cond_scale: float = 4.0
    data_std: float | None = 0.5


@dataclass
class GuidanceConfig:
    """Discriminator training plus how strongly expansion uses it."""
    enabled: bool = False
    weight: float = 1.0
    n_generated: int = 400    # inpaintings of training images used as the "generated" class
    train: DiscConfig = field(default_factory=DiscConfig)


@dataclass
class ExpansionConfig:
    K: int = 10
    seed: int = 0
    chunk: int = 64


@dataclass
class RefinementConfig:
    l: int = 6
    m: int = 5
    seed: int = 0


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    reid: ReIDConfig = field(default_factory=ReIDConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    out: str = "run"

    def validate(self) -> "RunConfig":
        self.dataset.validate()
        self.diffusion.validate()
        self.guidance.train.validate()
        self.reid.validate()
        s = self.schedule
        if s.kind != "linear":
            raise ConfigError(f"unknown schedule kind {s.kind!r}")
        if not (s.T >= 1 and 0 < s.beta_start <= s.beta_end < 1):
            raise ConfigError(f"invalid schedule {dataclasses.asdict(s)}")
        if self.expansion.K < 1:
            raise ConfigError("expansion K must be >= 1")
        if self.refinement.l < 0 or self.refinement.m < 1:
            raise ConfigError("refinement needs l >= 0 and m >= 1")
        if not (self.guidance.weight >= 0 and self.guidance.weight < float("inf")):
            raise ConfigError("guidance weight must be finite and >= 0")
        return self

    def to_dict(self) -> dict:
        return to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return from_plain(cls, d, "config")

    def section_hash(self, *names: str) -> str:
        """sha256 over the canonical JSON of the named sections (all when empty)."""
        d = self.to_dict()
        payload = {}
        for name in names:
            node = d
            for part in name.split("."):
                node = node[part]
            payload[name] = node
        payload = d if not names else payload
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    return obj


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def from_plain(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in d.items():
        default = _default_of(fields[name])
        path = f"{where}.{name}"
        if value is None and "None" in str(fields[name].type):
            kwargs[name] = None
        elif dataclasses.is_dataclass(default):
            kwargs[name] = from_plain(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true/false")
            kwargs[name] = value
        elif isinstance(default, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
            if int(value) != value:
                raise ConfigError(f"{path}: expected an integer, got {value}")
            kwargs[name] = int(value)
        elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            kwargs[name] = float(value)
        elif default is None or isinstance(value, type(default)):
            kwargs[name] = value
        else:
            raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return cls(**kwargs)


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return RunConfig.from_dict(d).validate()


def set_value(config: RunConfig, dotted: str, raw: str) -> None:
    """Apply a ``section.key=value`` override, parsing ``raw`` as JSON when possible."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    d = config.to_dict()
    node = d
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value
    new = RunConfig.from_dict(d)
    for f in dataclasses.fields(RunConfig):
        setattr(config, f.name, getattr(new, f.name))
