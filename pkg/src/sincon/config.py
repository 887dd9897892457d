"""Experiment configuration: nested dataclasses loaded from YAML with dotted overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attack import AttackConfig
from .detector import TrainConfig, VARIANTS
from .encode import EncoderConfig
from .synth import ConfigError, CorpusSpec

ARMS = ("normal", "sincon", "sincon-random")
ATTACK_MODES = ("self", "transfer")


@dataclass
class DetectorConfig:
    variant: str = "gcn"
    hidden_dims: tuple[int, ...] = (32,)
    init_scale: float = 0.1
    surrogate_variant: str = "bigcn"  # normal-trained stop oracle for transfer attacks

    def __post_init__(self):
        self.hidden_dims = tuple(self.hidden_dims)
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigError("hidden_dims must be a non-empty list of positive sizes")
        for v in (self.variant, self.surrogate_variant):
            if v not in VARIANTS:
                raise ConfigError(f"unknown detector variant {v!r}")


@dataclass
class GeneratorConfig:
    kind: str = "builtin"  # builtin | http
    length: int = 8
    url: str = ""
    timeout: float = 30.0
    retries: int = 2

    def __post_init__(self):
        if self.kind not in ("builtin", "http"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.kind == "http" and not self.url:
            raise ConfigError("http generator needs a url")


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    n_seeds: int = 5
    test_fraction: float = 0.2
    arms: tuple[str, ...] = ARMS
    attack_modes: tuple[str, ...] = ATTACK_MODES
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.arms = tuple(self.arms)
        self.attack_modes = tuple(self.attack_modes)
        bad = [a for a in self.arms if a not in ARMS] + [m for m in self.attack_modes if m not in ATTACK_MODES]
        if bad:
            raise ConfigError(f"unknown arms/attack modes: {bad}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        self.corpus.validate()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {"encoder": EncoderConfig, "detector": DetectorConfig, "train": TrainConfig,
             "attack": AttackConfig, "generator": GeneratorConfig, "corpus": CorpusSpec}


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def from_dict(data: dict | None) -> ExperimentConfig:
    data = copy.deepcopy(data or {})
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    return _build(ExperimentConfig, kwargs, "config")


def _coerce(text: str):
    return yaml.safe_load(text)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars/lists)."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _coerce(value)
    return data


def load_config(path: str | Path | None = None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
    return from_dict(apply_overrides(data, overrides))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
