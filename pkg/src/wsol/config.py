"""Run configuration: nested JSON sections with dotted ``--set`` overrides."""
from __future__ import annotations

import copy
import json

from .augment import POLICIES, AugmentSpec
from .model import VARIANTS

DEFAULTS = {
    "data": {"num_classes": 4, "per_class_train": 100, "per_class_test": 25, "side": 64, "seed": 0},
    "model": {"variant": "res18", "init_seed": 0},
    "train": {
        "epochs": 1500,
        "batch_size": 256,
        "base_lr": 0.1,
        "lr_drop_every": 250,
        "lr_drop_factor": 10.0,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "decay_bn": True,
        "seed": 0,
    },
    "augment": {
        "policy": "none",
        "hns_grid_sizes": [0, 4, 8, 16],
        "hide_prob": 0.5,
        "fill_value": None,
        "area_range": [0.08, 1.0],
        "aspect_range": [0.75, 1.3333],
        "max_attempts": 10,
    },
    "eval": {"threshold_frac": 0.2, "connectivity": 8},
    "matrix": {
        "policies": list(POLICIES),
        "batch_sizes": [32, 128, 256],
        "variants": ["res34", "res18"],
        "seeds": [0],
    },
}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve(path=None, overrides=()):
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        _merge(cfg, loaded)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        parts = key.split(".")
        nested = {}
        cur = nested
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = _parse_value(raw)
        _merge(cfg, nested)
    validate(cfg)
    return cfg


def validate(cfg):
    from .train import TrainConfig

    try:
        TrainConfig(**cfg["train"], augment=AugmentSpec(**cfg["augment"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["model"]["variant"] not in VARIANTS:
        raise ConfigError(f"unknown model variant {cfg['model']['variant']!r}")
    if cfg["eval"]["connectivity"] not in (4, 8):
        raise ConfigError("eval.connectivity must be 4 or 8")
    if not 0 < cfg["eval"]["threshold_frac"] < 1:
        raise ConfigError("eval.threshold_frac must lie in (0, 1)")
    for p in cfg["matrix"]["policies"]:
        if p not in POLICIES:
            raise ConfigError(f"unknown matrix policy {p!r}")
    for v in cfg["matrix"]["variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown matrix variant {v!r}")


def train_config(cfg):
    from .train import TrainConfig

    return TrainConfig(**cfg["train"], augment=AugmentSpec(**cfg["augment"]))


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
