"""Versioned YAML experiment configuration.

Every section maps onto one dataclass; keys left out of a file keep their
defaults. ``schema_version`` must be present and equal to ``SCHEMA_VERSION``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .apc import APCConfig
from .attacks import AttackSpec, default_specs
from .datasets import DatasetConfig
from .defenses import DefenseSpec
from .victims import TrainConfig

SCHEMA_VERSION = 1
VICTIM_NAMES = ("pointnet_mini", "dgcnn_mini")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    attacks: tuple[str, ...] = ("add", "cluster", "perturb", "knn", "ifgm", "pgd", "drop")
    defenses: tuple[str, ...] = ("none", "srs", "sor", "apc")
    # fraction of train-split examples that get attacked for APC training
    train_attack_fraction: float = 1.0
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    ablation_epochs: int | None = None
    efficiency_repeats: int = 100
    efficiency_samples: int = 30

    def __post_init__(self):
        self.attacks = tuple(self.attacks)
        self.defenses = tuple(self.defenses)
        self.ablation_seeds = tuple(int(s) for s in self.ablation_seeds)
        if not 0 < self.train_attack_fraction <= 1:
            raise ConfigError("eval.train_attack_fraction must lie in (0, 1]")


@dataclass
class ExperimentConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    victims: dict[str, TrainConfig] = field(
        default_factory=lambda: {name: TrainConfig() for name in VICTIM_NAMES})
    attacks: dict[str, AttackSpec] = field(default_factory=default_specs)
    defenses: DefenseSpec = field(default_factory=DefenseSpec)
    apc: APCConfig = field(default_factory=APCConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Propagate one master seed into every section."""
        out = copy.deepcopy(self)
        out.seed = seed
        out.data = replace(out.data, seed=seed)
        out.victims = {k: replace(v, seed=seed) for k, v in out.victims.items()}
        out.apc = replace(out.apc, seed=seed)
        out.defenses = replace(out.defenses, seed=seed)
        return out

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, base, overrides: dict, section: str):
    if overrides is None:
        return base
    if not isinstance(overrides, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    try:
        return replace(base, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r}: {exc}") from exc


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {"data", "victims", "attacks", "defenses", "apc", "eval", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    cfg = ExperimentConfig()
    cfg.data = _build(DatasetConfig, cfg.data, raw.get("data"), "data")
    for name, over in (raw.get("victims") or {}).items():
        if name not in VICTIM_NAMES:
            raise ConfigError(f"unknown victim {name!r}")
        cfg.victims[name] = _build(TrainConfig, cfg.victims[name], over, f"victims.{name}")
    for name, over in (raw.get("attacks") or {}).items():
        base = cfg.attacks.get(name, AttackSpec(name))
        over = dict(over or {})
        extras = over.pop("extras", None)
        spec = _build(AttackSpec, base, over, f"attacks.{name}")
        if extras:
            spec = replace(spec, extras={**spec.extras, **extras})
        cfg.attacks[name] = spec
    cfg.defenses = _build(DefenseSpec, cfg.defenses, raw.get("defenses"), "defenses")
    cfg.apc = _build(APCConfig, cfg.apc, raw.get("apc"), "apc")
    cfg.eval = _build(EvalConfig, cfg.eval, raw.get("eval"), "eval")
    if "seed" in raw:
        cfg = cfg.with_seed(int(raw["seed"]))
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw)


def dump_config(config: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(config.to_dict(), sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text
