"""Experiment configuration: strict JSON with a documented schema.

Unknown keys are rejected at every nesting level so typos in sweep configs
fail loudly. The ``KOPA_SEED`` environment variable overrides the seed from
both the file and the command line.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .errors import ConfigError

KOPA_SEED_ENV = "KOPA_SEED"


@dataclass(frozen=True)
class Field:
    kind: type
    default: object = None
    required: bool = False
    choices: tuple | None = None


_DATA = {
    "train": Field(str, required=True),
    "valid": Field(str, required=True),
    "test": Field(str, required=True),
    "entities": Field(str, required=True),
    "relations": Field(str, required=True),
}

_KGE = {
    "family": Field(str, "rotate", choices=("transe", "distmult", "complex", "rotate")),
    "dim": Field(int, 128),
    "margin": Field(float, 8.0),
    "margin_grid": Field(list, [0.0, 4.0, 6.0, 8.0, 12.0]),
    "num_negatives": Field(int, 32),
    "adv_temperature": Field(float, 1.0),
    "lr": Field(float, 0.05),
    "epochs": Field(int, 500),
    "batch_size": Field(int, 512),
    "optimizer": Field(str, "sgd", choices=("sgd", "adam")),
    "embeddings": Field(str, None),
}

_PROMPTS = {
    "mode": Field(str, "it", choices=("zsr", "icl", "it", "sit", "kopa")),
    "k": Field(int, 4),
    "neighbors": Field(int, 4),
    "split": Field(str, "train", choices=("train", "valid", "test")),
}

_ADAPTER = {
    "embeddings": Field(str, None),
    "corpus": Field(str, None),
    "eval_corpus": Field(str, None),
    "adapter_file": Field(str, None),
    "lm_file": Field(str, None),
    "d_model": Field(int, 64),
    "n_layers": Field(int, 2),
    "n_heads": Field(int, 2),
    "context_len": Field(int, 256),
    "position": Field(str, "prefix", choices=("prefix", "infix", "suffix", "all")),
    "lr": Field(float, 1e-3),
    "epochs": Field(int, 300),
    "batch_size": Field(int, 32),
    "loss_mode": Field(str, "answer", choices=("answer", "full")),
}

_INDUCTIVE = {
    "rates": Field(list, [0.1, 0.2, 0.3]),
}

_BACKEND = {
    "endpoint": Field(str, None),
    "timeout": Field(float, 30.0),
    "max_retries": Field(int, 3),
    "prompt_field": Field(str, "prompt"),
    "response_field": Field(str, "text"),
    "max_in_flight": Field(int, 4),
    "instances": Field(str, None),
}

SCHEMA: dict = {
    "seed": Field(int, required=True),
    "out_dir": Field(str, required=True),
    "data": _DATA,
    "kge": _KGE,
    "prompts": _PROMPTS,
    "adapter": _ADAPTER,
    "inductive": _INDUCTIVE,
    "backend": _BACKEND,
}


def _check_value(path: str, value, f: Field):
    if f.kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if f.kind is int and isinstance(value, bool):
        raise ConfigError(f"config key {path}: expected int, got bool")
    if not isinstance(value, f.kind):
        raise ConfigError(f"config key {path}: expected {f.kind.__name__}, got {type(value).__name__}")
    if f.kind is list:
        if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
            raise ConfigError(f"config key {path}: expected a list of numbers")
        value = [float(x) for x in value]
    if f.choices is not None and value not in f.choices:
        raise ConfigError(f"config key {path}: {value!r} not in {f.choices}")
    return value


def _validate(section: dict, schema: dict, prefix: str) -> dict:
    unknown = set(section) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(prefix + k for k in unknown))}")
    out = {}
    for key, spec in schema.items():
        path = prefix + key
        if isinstance(spec, dict):
            sub = section.get(key)
            if sub is None:
                out[key] = None
                continue
            if not isinstance(sub, dict):
                raise ConfigError(f"config key {path}: expected an object")
            out[key] = _validate(sub, spec, path + ".")
        else:
            if key not in section:
                if spec.required:
                    raise ConfigError(f"config key {path} is required")
                out[key] = spec.default
            else:
                out[key] = _check_value(path, section[key], spec)
    return out


def load_config(path) -> dict:
    """Parse, validate, and default-fill a config file; applies KOPA_SEED."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = _validate(raw, SCHEMA, "")
    apply_seed_env(cfg)
    return cfg


def apply_seed_env(cfg: dict) -> None:
    value = os.environ.get(KOPA_SEED_ENV)
    if value is None:
        return
    try:
        cfg["seed"] = int(value)
    except ValueError:
        raise ConfigError(f"{KOPA_SEED_ENV} must be an integer, got {value!r}") from None


def require_section(cfg: dict, name: str) -> dict:
    section = cfg.get(name)
    if section is None:
        raise ConfigError(f"this command needs a {name!r} section in the config")
    return section
