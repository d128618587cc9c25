"""Run configuration: built-in desk-scale defaults, YAML files and dotted overrides."""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .corpus import CorpusConfig

CONFIG_ENV = "TEXTCUE_CONFIG"


class ConfigError(ValueError):
    pass


def _train(max_epochs: int) -> dict:
    return {"lr": None, "weight_decay": None, "batch_size": 8, "clip_norm": 5.0,
            "max_epochs": max_epochs, "min_lr": 1e-8, "halve_patience": 2,
            "stop_patience": 10, "k_neg": 2, "max_minutes": None, "deterministic": True}


def default_config() -> dict:
    """Desk-scale defaults: 1 s clips at 8 kHz and small masking networks."""
    return {
        "seed": 0,
        "corpus": CorpusConfig().to_dict(),
        "embed": {"dim": 512, "seed": 0},
        "tpe": {"model": {"D": 64, "B": 32, "hidden": 32, "L": 40, "R": 2, "K": 20, "N": 1,
                          "emb_dim": 512},
                "train": _train(24)},
        "dprnn": {"model": {"I": 2, "D": 64, "B": 32, "hidden": 32, "L": 40, "R": 2, "K": 20},
                  "train": _train(12)},
        "tsr": {"model": {"dim": 512, "hidden": 2048, "attn_dim": 512, "heads": 1},
                "train": _train(4)},
        "eval": {"split": "test"},
    }


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, item: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML file (``path`` or ``$TEXTCUE_CONFIG``), then overrides."""
    cfg = default_config()
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, data)
    for item in overrides:
        apply_override(cfg, item)
    CorpusConfig.from_dict(cfg["corpus"])  # validate early
    return cfg


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    return path
