"""Nested run configuration: YAML file + dotted overrides + stable hash.

Every key a run can consume is declared in DEFAULTS; anything else is
rejected so configs cannot silently drift.
"""

from __future__ import annotations

import copy
import hashlib
import json

import yaml


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs",
    "world": {
        "preset": "default",          # default | small | pilot
        "n_items": 400,
        "n_topics": 8,
        "vocab": 256,
        "tokens_per_item": 8,
        "d_content": 18,
        "min_interactions": 6,
        "max_interactions": 12,
        "content_noise": 0.5,
        "anti_concentration": 0.7,
        "cohorts": [["young_f", 500, 1.0], ["young_m", 500, 0.5],
                    ["older_f", 500, 0.0], ["older_m", 500, -1.0]],
    },
    "sid": {"levels": 3, "codewords": 16},
    "backbone": {"d_model": 64, "heads": 4, "enc_layers": 2,
                 "dec_layers": 2, "d_ff": 128, "t_max": 16},
    "knowledge": {"d_llm": 64, "layers": 2, "heads": 4, "d_ff": 128,
                  "t_max": 96, "pretrain_epochs": 10, "lr": 1e-3},
    "instructions": {"k": 4, "codewords": 16, "tau": 1.0},
    "fusion": {"mode": "residual", "heads": 4},
    "train": {"steps": 200, "batch_size": 32, "eta_theta": 1e-4,
              "eta_lambda": 5e-4, "lambda0": 0.05, "delta": 1e-4,
              "eps": 1e-4, "beta": 0.5, "beta_grid": [0.1, 0.3, 0.5, 0.7],
              "variant": "lwgr", "strategy": "frozen", "optimizer": "sgd",
              "clip_norm": 1.0, "reference_steps": 150,
              "reference_lr": 3e-3},
    "eval": {"k_values": [5, 10], "beam": 20},
    "sweep": {"k_grid": [1, 3, 5, 7, 9]},
    "serving": {"refresh_period_ms": 1000.0, "requests": 100,
                "horizon_ms": 10000.0, "k": 5, "lookup_ms": 0.05,
                "fusion_ms": 0.3, "decode_ms_per_level": 2.0,
                "refresh_ms_per_user": 40.0},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        full = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {full}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {full} expects a mapping")
            out[key] = _merge(base[key], value, full + ".")
        else:
            out[key] = value
    return out


def _parse_scalar(text: str):
    value = yaml.safe_load(text)
    if isinstance(value, str):
        # YAML 1.1 misses bare scientific notation like 2e-4.
        try:
            return float(value)
        except ValueError:
            return value
    return value


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Dotted assignments like train.steps=50."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        node: dict = {}
        leaf = node
        parts = dotted.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = _parse_scalar(raw)
        config = _merge(config, node)
    return config


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} is not a mapping")
        config = _merge(DEFAULTS, loaded)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def config_hash(config: dict) -> str:
    """Stable under key ordering: canonical sorted-key JSON."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def write_snapshot(path: str, config: dict):
    with open(path, "w") as f:
        yaml.safe_dump(config, f, sort_keys=True)
