"""Experiment configuration: YAML files validated against a schema of defaults.

A config may name other files under ``include:`` (paths relative to the
including file); they are merged first, in order, and the including file
wins. ``env.table`` may point at a transition-table YAML file.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "mode": "offpolicy",                     # offpolicy | offline
    "seeds": list(range(10)),
    "env": {
        "table": None,
        "max_steps": 20,
        "terminal_reward_mask_prob": 0.9,
        "noise_std": 0.0,
        "diabetic_prob": 0.2,
    },
    "dataset": {
        "n_trajectories": 5000,
        "behavior": {"kind": "uniform"},
        "fractions": [0.8, 0.05, 0.15],
    },
    "training": {
        "gamma": 1.0,
        "batch_size": 256,
        "learning_rate": 1.0e-4,
        "grad_clip": 10.0,
        "hidden": [64, 64],
    },
    "phase1": {
        "beta": 40.0,
        "alpha": 0.0,
        "concentration": [1.0, 10.0, 10.0, 10.0, 10.0],
        "particle_count": 32,
        "target_update_period": 10000,
        "total_updates": 100000,
    },
    "prune": {
        "beta": [20.0, 40.0, 160.0],
        "m": None,
    },
    "phase2": {
        "alpha": 0.0,
        "target_update_period": 10000,
        "total_updates": 100000,
        "warm_start": False,
    },
    "baselines": {
        "target_update_period": 10000,
        "total_updates": 100000,
        "dqn": {"enabled": True, "reward_weights": None},
        "cql": {"enabled": True, "alpha": [0.001]},
        "bcq": {"enabled": True, "threshold": [0.3]},
    },
    "behavior_model": {
        "learning_rate": 0.1,
        "epochs": 500,
        "patience": 20,
        "l2": 0.0,
    },
    "eval": {
        "metrics": ["wis", "delta_mr", "overlap", "prune", "percentile", "return"],
        "method": "rollout",                 # rollout | exact
        "n_episodes": 1000,
        "every": 10000,
        "soften_epsilon": 0.01,
        "wis_clip": None,
    },
}

_CHOICES = {("mode",): {"offline", "offpolicy"}, ("eval", "method"): {"rollout", "exact"},
            ("dataset", "behavior", "kind"): {"uniform", "clinician", "optimal"}}

# keys whose value is a free-form mapping rather than a schema section
_OPEN = {("dataset", "behavior")}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "behavior":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check(cfg: dict, schema: dict, path: tuple = ()) -> None:
    for key, value in cfg.items():
        where = ".".join(path + (key,))
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        default = schema[key]
        if path + (key,) in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping, got {type(value).__name__}")
            _check(value, default, path + (key,))
        elif value is not None and default is not None:
            ok = (isinstance(value, (int, float)) and not isinstance(value, bool)
                  if isinstance(default, float) else
                  isinstance(value, bool) if isinstance(default, bool) else
                  isinstance(value, int) and not isinstance(value, bool) if isinstance(default, int) else
                  isinstance(value, (list, int, float)) if isinstance(default, list) else
                  isinstance(value, type(default)))
            if not ok:
                raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
        choices = _CHOICES.get(path + (key,))
        if choices is not None and value not in choices:
            raise ConfigError(f"{where} must be one of {sorted(choices)}, got {value!r}")


def _load_raw(path: Path, seen: tuple = ()) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = data.pop("include", [])
    merged: dict = {}
    for inc in [includes] if isinstance(includes, str) else includes:
        merged = _merge(merged, _load_raw(path.parent / inc, seen + (path,)))
    merged = _merge(merged, data)
    table = merged.get("env", {}).get("table")
    if isinstance(table, str) and not Path(table).is_absolute():
        merged["env"]["table"] = str((path.parent / table).resolve())
    return merged


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def resolve(overrides: dict | None = None, path: str | Path | None = None,
            sets: list[str] | None = None) -> dict:
    """Defaults, then the file (with includes), then ``overrides``, then ``key=value`` strings."""
    cfg = copy.deepcopy(DEFAULTS)
    layers = []
    if path is not None:
        layers.append(_load_raw(Path(path)))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        _check(layer, DEFAULTS)
        cfg = _merge(cfg, layer)
    for text in sets or []:
        keys, value = parse_override(text)
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    _check(cfg, DEFAULTS)
    _validate_values(cfg)
    return cfg


def _as_list(x) -> list:
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _validate_values(cfg: dict) -> None:
    if not cfg["seeds"] or not all(isinstance(s, int) and s >= 0 for s in cfg["seeds"]):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    fr = cfg["dataset"]["fractions"]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("dataset.fractions must be three non-negative numbers summing to 1")
    if cfg["dataset"]["n_trajectories"] < 0:
        raise ConfigError("dataset.n_trajectories must be >= 0")
    if any(c <= 0 for c in cfg["phase1"]["concentration"]):
        raise ConfigError("phase1.concentration entries must be positive")
    if any(b <= 0 for b in _as_list(cfg["prune"]["beta"])) or cfg["phase1"]["beta"] <= 0:
        raise ConfigError("inverse temperatures must be positive")
    m = cfg["prune"]["m"]
    if m is not None and (isinstance(m, bool) or not isinstance(m, int) or m < 1):
        raise ConfigError("prune.m must be a positive integer or null")
    if not 0 <= cfg["eval"]["soften_epsilon"] < 1:
        raise ConfigError("eval.soften_epsilon must lie in [0, 1)")
    for section in ("phase1", "phase2", "baselines"):
        if cfg[section]["total_updates"] < 0 or cfg[section]["target_update_period"] < 1:
            raise ConfigError(f"{section}: total_updates >= 0 and target_update_period >= 1 required")


def prune_betas(cfg: dict) -> list[float]:
    return [float(b) for b in _as_list(cfg["prune"]["beta"])]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def dump(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))
