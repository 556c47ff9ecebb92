"""Flat key-value run configuration shared by every CLI subcommand."""
from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .policy import PolicyConfig
from .training import TrainConfig

# keys consumed by the command line layer rather than the model or trainer
RUN_KEYS = {
    "data": "dataset directory (manifest.jsonl inside)",
    "out": "output file or directory",
    "episodes": "evaluation episodes per split",
    "eval_seed": "seed for evaluation scenes",
    "split": "evaluation split(s): seen, unseen or all",
    "variants": "ablation variant ids, comma separated",
    "budget": "ablation wall-clock budget in seconds (0 = unlimited)",
}

POLICY_KEYS = {f.name for f in dataclasses.fields(PolicyConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
ALL_KEYS = POLICY_KEYS | TRAIN_KEYS | set(RUN_KEYS)
assert not POLICY_KEYS & TRAIN_KEYS


class ConfigError(ValueError):
    pass


def check_keys(d: dict, source: str) -> None:
    for k in d:
        if k not in ALL_KEYS:
            raise ConfigError(f"{source}: unknown key {k!r}")


def load_config(path) -> dict:
    """Read a flat YAML mapping; nested values or unknown keys are errors naming the key."""
    try:
        d = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed config: {exc}") from exc
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a key: value mapping")
    check_keys(d, str(path))
    for k, v in d.items():
        if isinstance(v, dict):
            raise ConfigError(f"{path}: key {k!r} must be a scalar or list, not a mapping")
    return d


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    k, v = item.split("=", 1)
    k = k.strip().replace("-", "_")
    check_keys({k: None}, "--set")
    return k, yaml.safe_load(v)


def build_configs(d: dict) -> tuple[PolicyConfig, TrainConfig]:
    try:
        p = PolicyConfig.from_dict({k: v for k, v in d.items() if k in POLICY_KEYS})
        t = TrainConfig.from_dict({k: v for k, v in d.items() if k in TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return p, t


def documented_keys() -> str:
    lines = [f"{k}: policy (default {v!r})" for k, v in sorted(PolicyConfig().to_dict().items())]
    lines += [f"{k}: training (default {v!r})" for k, v in sorted(TrainConfig().to_dict().items())]
    lines += [f"{k}: {v}" for k, v in sorted(RUN_KEYS.items())]
    return "\n".join(lines)
