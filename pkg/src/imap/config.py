"""Run configuration: TOML in, validated dataclasses, JSON out."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ALGOS = ("imap_la", "imap_ga", "sparse_mappo", "sl_mappo", "online_ipl")
ENVS = ("coop_matrix", "grid_gather", "tabular")
PREFERENCE_SOURCES = ("rule", "llm")


class ConfigError(ValueError):
    pass


@dataclass
class EnvSection:
    name: str = "coop_matrix"
    params: dict = field(default_factory=dict)


@dataclass
class PpoSection:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    value_clip: float = 0.2
    entropy_coef: float = 0.01
    lr: float = 5e-4
    critic_lr: float = 5e-4
    epochs: int = 10
    minibatch: int = 256
    max_grad_norm: float = 10.0
    standardize: bool = True
    paper_literal_delta: bool = False
    hidden: list = field(default_factory=lambda: [256, 256])


@dataclass
class RewardSection:
    hidden: list = field(default_factory=lambda: [256, 256])
    lr: float = 5e-4
    steps_per_iter: int = 5
    pref_batch: int = 32
    transition_batch: int = 256
    reg_coef: float = 0.5
    beta: float = 1.0
    behavior_correction: bool = True
    max_pairs: int = 64
    pref_capacity: int = 10_000
    transition_capacity: int = 20_000
    ipl_extract_every: int = 20
    bc_steps: int = 50
    bc_lr: float = 1e-3


@dataclass
class LlmSection:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    timeout: float = 30.0
    max_concurrency: int = 4
    audit_file: str = "llm_audit.jsonl"


@dataclass
class RunConfig:
    algo: str = "imap_la"
    preference_source: str = "rule"
    seed: int = 0
    iterations: int = 300
    episodes_per_iter: int = 32
    workers: int = 1
    checkpoint_every: int = 10
    output_dir: str = "runs/default"
    env: EnvSection = field(default_factory=EnvSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    reward: RewardSection = field(default_factory=RewardSection)
    llm: LlmSection = field(default_factory=LlmSection)

    def validate(self) -> "RunConfig":
        errors = []
        if self.algo not in ALGOS:
            errors.append(f"algo must be one of {', '.join(ALGOS)}, got {self.algo!r}")
        if self.env.name not in ENVS:
            errors.append(f"env.name must be one of {', '.join(ENVS)}, got {self.env.name!r}")
        if self.preference_source not in PREFERENCE_SOURCES:
            errors.append(f"preference_source must be rule or llm, got {self.preference_source!r}")
        for name in ("iterations", "episodes_per_iter", "workers", "checkpoint_every"):
            if getattr(self, name) < (0 if name == "iterations" else 1):
                errors.append(f"{name} out of range: {getattr(self, name)}")
        p, r = self.ppo, self.reward
        if not 0 <= p.gamma <= 1 or not 0 <= p.gae_lambda <= 1:
            errors.append("ppo.gamma and ppo.gae_lambda must lie in [0, 1]")
        if p.clip <= 0 or p.value_clip <= 0 or p.entropy_coef < 0:
            errors.append("ppo.clip and ppo.value_clip must be > 0, entropy_coef >= 0")
        if p.epochs < 1 or p.minibatch < 1:
            errors.append("ppo.epochs and ppo.minibatch must be >= 1")
        if r.beta <= 0 or r.reg_coef < 0:
            errors.append("reward.beta must be > 0 and reward.reg_coef >= 0")
        for name in ("pref_batch", "transition_batch", "pref_capacity", "transition_capacity", "ipl_extract_every"):
            if getattr(r, name) < 1:
                errors.append(f"reward.{name} must be >= 1")
        for name in ("hidden",):
            for sec in (p, r):
                h = getattr(sec, name)
                if not all(isinstance(x, int) and x > 0 for x in h):
                    errors.append(f"hidden sizes must be positive integers, got {h}")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with dotted keys replaced, e.g. ``{"ppo.lr": 1e-3, "seed": 4}``."""
        data = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            node = data
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return from_dict(data)

    def replace(self, env: str | None = None, **overrides) -> "RunConfig":
        if env is not None:
            overrides["env.name"] = env
        return self.with_overrides(overrides)


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _coerce(default, value, key)
    return cls(**kwargs)


def _coerce(default, value, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return list(value)
    if isinstance(default, dict):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{key} must be a table, got {value!r}")
        return dict(value)
    return value


def from_dict(data: Mapping[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def parse_value(text: str):
    """Interpret a ``--set key=value`` right-hand side as a TOML value, else a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text
