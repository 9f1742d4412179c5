"""Run configuration files: YAML sections validated against the dataclasses
they configure.  Unknown keys are rejected; the resolved configuration is
written next to every run's outputs."""

from __future__ import annotations

import copy
import dataclasses
import os
from pathlib import Path
from typing import Any

import yaml

from .forest import ForestConfig
from .linear import LinearFitConfig, SGDConfig
from .nn.segnet import SegNetParams
from .nn.train import TrainerConfig
from .pipeline import FAMILIES, is_known_feature
from .scenario import config_from_dict, config_to_dict

SEED_ENV = "STRATUS_SEED"
RESOLVED_NAME = "resolved_config.yaml"
NETWORK_KEYS = ("base_filters", "kernel", "n_pools", "unpool", "skip", "x_last", "odd_pool")


class ConfigError(ValueError):
    pass


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _defaults(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            v = f.default
        else:
            v = f.default_factory()
        out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
    return out


EXPERIMENT_DEFAULTS = {"model": "linear", "features": ["harmonie", "gefs_avg"], "season": "all", "lead": 12,
                       "threshold": 0.5, "fold": 2016, "seed": None, "grid": None}
ABLATION_DEFAULTS = {"reference": ["harmonie", "gefs_avg"], "add": [], "remove": ["harmonie", "gefs_avg"],
                     "leads": [12], "thresholds": [0.5], "seasons": ["all"], "folds": [2016], "seeds": [0],
                     "duplicate_diagnostic": False, "diagnostic_feature": "harmonie"}


def defaults() -> dict:
    return {
        "scenario": config_to_dict(config_from_dict({})),
        "scenario_dir": None,
        "output_dir": None,
        "experiment": dict(EXPERIMENT_DEFAULTS),
        "trainer": _defaults(TrainerConfig, skip=("seed",)),
        "linear": {**_defaults(LinearFitConfig, skip=("sgd",)), "sgd": _defaults(SGDConfig, skip=("seed",))},
        "forest": _defaults(ForestConfig, skip=("seed",)),
        "network": {k: v for k, v in _defaults(SegNetParams).items() if k in NETWORK_KEYS},
        "ablation": dict(ABLATION_DEFAULTS),
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "target_cover":
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then ``overrides`` (dotted keys allowed).
    The result is validated; unknown keys raise :class:`ConfigError`."""
    cfg = defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for key, value in (overrides or {}).items():
        cfg = _merge(cfg, _nest(key, value))
    resolve_seed(cfg)
    validate(cfg)
    return cfg


def _nest(dotted: str, value) -> dict:
    parts = dotted.split(".")
    out: Any = value
    for p in reversed(parts):
        out = {p: out}
    return out


def parse_assignment(text: str) -> tuple[str, Any]:
    """``key.sub=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def resolve_seed(cfg: dict):
    """Experiment seed: explicit value, else ``STRATUS_SEED``, else the
    scenario seed."""
    if cfg["experiment"]["seed"] is None:
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                cfg["experiment"]["seed"] = int(env)
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
        else:
            cfg["experiment"]["seed"] = int(cfg["scenario"]["seed"])


def validate(cfg: dict):
    try:
        config_from_dict(cfg["scenario"])
        TrainerConfig(**cfg["trainer"])
        lin = dict(cfg["linear"])
        lin["sgd"] = SGDConfig(**lin["sgd"])
        LinearFitConfig(**lin)
        ForestConfig(**cfg["forest"])
        SegNetParams(input_size=cfg["scenario"]["window_px"], **cfg["network"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    exp = cfg["experiment"]
    if exp["model"] not in FAMILIES:
        raise ConfigError(f"experiment.model must be one of {', '.join(FAMILIES)}")
    feats = list(exp["features"]) + list(cfg["ablation"]["reference"]) + list(cfg["ablation"]["add"])
    bad = [f for f in feats if not is_known_feature(f)]
    if bad:
        raise ConfigError(f"unknown features: {', '.join(bad)}")
    if exp["grid"] is not None and (not isinstance(exp["grid"], list) or not exp["grid"]):
        raise ConfigError("experiment.grid must be a non-empty list of mappings")


def family_params(cfg: dict, family: str) -> dict:
    """Base hyperparameters for a family from its config section(s)."""
    if family == "linear":
        return copy.deepcopy(cfg["linear"])
    if family == "forest":
        return dict(cfg["forest"])
    if family == "network":
        return {**cfg["trainer"], **cfg["network"]}
    return {}


def write_resolved(cfg: dict, directory: str | Path) -> Path:
    path = Path(directory) / RESOLVED_NAME
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path
