"""Run configuration: scale profiles, overrides and schema validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .diffusion.model import ArchConfig
from .diffusion.train import TrainConfig
from .evaluator import ClassifierConfig
from .steering import SteerConfig

ROOT_ENV = "CONCEPT_REACH_ROOT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    target_total: int = 54000
    rng_seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 100
    concept_set_size: int = 1000
    sample_batch: int = 100
    # generated images per tuple mixed into classifier training; 0 trains on renders only
    classifier_generated_per_tuple: int = 1000
    classifier_model_seeds: tuple[int, ...] = (100, 101)


@dataclass(frozen=True)
class ExperimentConfig:
    target_seed: int = 1234
    baseline_start: str = "a green triangle behind a red triangle"
    baseline_targets_per_group: int = 3
    scarcity_target: str = "red:triangle:green:square"
    scarcity_concepts: tuple[str, ...] = ("c1=red", "s1=triangle", "c2=green", "s2=square")
    p_grid: tuple[float, ...] = (1 / 3, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.0)
    underspec_targets: int = 10
    underspec_full_prompt_variant: bool = True
    bias_ties: tuple[str, ...] = ("c1=blue,s1=circle", "c2=red,s2=triangle")
    injection_grid: tuple[int, ...] = (0, 10, 50, 100, 500, 1000)
    bias_targets_per_kind: int = 6
    removal_targets: tuple[str, ...] = ("green:triangle:blue:square", "red:circle:blue:triangle", "red:square:green:circle")
    removal_extra_prompts: int = 2
    methods: tuple[str, ...] = ("prompting", "prompt_steering", "h_steering")


@dataclass(frozen=True)
class RunConfig:
    profile: str = "paper"
    root: str = "runs"
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    steer: SteerConfig = field(default_factory=SteerConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def root_path(self) -> Path:
        return Path(self.root)


PROFILES: dict[str, dict] = {
    "paper": {},
    "smoke": {
        "seeds": [0],
        "data": {"target_total": 2700},
        "train": {"epochs": 5},
        "steer": {"steps": 200},
        "classifier": {"epochs": 3},
        "eval": {"n_samples": 50, "concept_set_size": 200, "classifier_generated_per_tuple": 0},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: Any, path: str = ""):
    """Instantiate nested frozen dataclasses, rejecting unknown keys."""
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None = None, profile: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Profile defaults, then the config file, then explicit overrides.

    The artifact root defaults to ``$CONCEPT_REACH_ROOT`` when set.
    """
    file_data = {}
    if path is not None:
        try:
            file_data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    overrides = overrides or {}
    profile = profile or overrides.get("profile") or file_data.get("profile") or "paper"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    data = _merge(asdict(RunConfig()), PROFILES[profile])
    if os.environ.get(ROOT_ENV):
        data["root"] = os.environ[ROOT_ENV]
    data = _merge(data, file_data)
    data = _merge(data, overrides)
    data["profile"] = profile
    cfg = _build(RunConfig, data)
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg: RunConfig) -> None:
    """Cross-field checks that would otherwise fail deep inside an experiment run."""
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")
    total = cfg.data.target_total
    bad = [n for n in cfg.experiment.injection_grid if not 0 <= n <= total]
    if bad:
        raise ConfigError(f"experiment.injection_grid values {bad} outside [0, data.target_total={total}]")
    bad = [p for p in cfg.experiment.p_grid if not 0 <= p <= 1 / 3 + 1e-12]
    if bad:
        raise ConfigError(f"experiment.p_grid values {bad} outside [0, 1/3]")


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True))


__all__ = ["ArchConfig", "ConfigError", "RunConfig", "load_config", "dump_config", "PROFILES"]
