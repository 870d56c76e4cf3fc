"""Run configuration: nested dataclasses that round-trip through JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .designspace import DEFAULT_BUDGET_FRACTION, DesignSpace
from .errors import ConfigError
from .experiment import DEFAULT_HEAD_LEARNING_RATE, DEFAULT_LEARNING_RATE
from .optim import OPTIMIZERS


@dataclass(frozen=True)
class PretrainConfig:
    num_sequences: int = 50_000
    epochs: int = 3
    lr: float = 0.01
    batch_size: int = 64
    mask_rate: float = 0.15
    optimizer: str = "sgd"
    momentum: float = 0.9
    clip_norm: float = 1.0


@dataclass(frozen=True)
class TaskConfig:
    train_size: int = 256
    val_size: int = 128
    seed: int = 0


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    head_learning_rate: float = DEFAULT_HEAD_LEARNING_RATE
    weight_decay: float = 0.01
    warmup_ratio: float = 0.06
    batch_size: int = 32


@dataclass(frozen=True)
class DiscoveryConfig:
    n_models: int = 20
    epochs: int = 2
    group_count: int = 4
    tunable_menu: str = "paper"
    strategy_menu: str = "paper"
    surrogate_sigma: float = 0.0
    surrogate_target: dict = None


COMPARE_METHODS = ("Adapter-only", "Prefix-only", "BitFit-only", "LoRA-only", "S4-base", "S4-3b", "random-S0")


@dataclass(frozen=True)
class CompareConfig:
    n_runs: int = 20
    epochs: int = 2
    methods: tuple = COMPARE_METHODS


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "out"
    checkpoint: str = None
    workers: int = None
    surrogate: bool = False
    timestamp: bool = True
    budget_fraction: float = DEFAULT_BUDGET_FRACTION
    bitfit_budget_fraction: float = 0.001
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    tasks: TaskConfig = field(default_factory=TaskConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def __post_init__(self):
        for name in ("budget_fraction", "bitfit_budget_fraction"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0 < v <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {v!r}")
        if self.workers is not None and (not isinstance(self.workers, int) or self.workers < 1):
            raise ConfigError(f"workers must be a positive integer, got {self.workers!r}")
        if self.pretrain.optimizer not in OPTIMIZERS:
            raise ConfigError(f"pretrain.optimizer must be one of {list(OPTIMIZERS)}, got {self.pretrain.optimizer!r}")
        d = self.discovery
        if d.n_models < 1 or d.epochs < 1 or self.compare.epochs < 1 or self.compare.n_runs < 2:
            raise ConfigError("n_models and epochs must be >= 1 and n_runs >= 2")
        if d.tunable_menu not in ("paper", "full") or d.strategy_menu not in ("paper", "full"):
            raise ConfigError("candidate menus must be 'paper' or 'full'")
        if d.group_count not in (4, 8):
            raise ConfigError(f"group_count must be 4 or 8, got {d.group_count}")
        unknown = set(self.compare.methods) - set(COMPARE_METHODS)
        if unknown:
            raise ConfigError(f"unknown comparison methods {sorted(unknown)}; choose from {list(COMPARE_METHODS)}")
        if d.surrogate_target is not None:
            DesignSpace.from_dict(d.surrogate_target)

    @property
    def checkpoint_path(self):
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.bin"

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["compare"]["methods"] = list(self.compare.methods)
        return out

    def emit(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_SECTIONS = {"backbone": BackboneConfig, "pretrain": PretrainConfig, "tasks": TaskConfig,
             "finetune": FinetuneConfig, "discovery": DiscoveryConfig, "compare": CompareConfig}


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config document must be a JSON object")
    d = dict(d)
    for key, cls in _SECTIONS.items():
        if key in d:
            section = dict(d[key])
            if key == "compare" and "methods" in section:
                section["methods"] = tuple(section["methods"])
            d[key] = _build(cls, section, key)
    return _build(RunConfig, d, "config")


def parse(text):
    try:
        return from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


def load(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    return parse(text)
