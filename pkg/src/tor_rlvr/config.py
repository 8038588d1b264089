"""Structured config files (TOML or JSON) and ``key=value`` overrides.

Keys are camelCase and grouped by module::

    algorithm = "tor-grpo"
    learningRate = 1e-3

    [selection]
    alphaR = 0.3
    gammaP = 0.5

Top-level keys configure the trainer; ``task``, ``policy``, ``selection`` and
``objective`` tables configure their modules.
"""
from __future__ import annotations

import dataclasses
import json
import re
import sys

from .errors import ConfigurationError
from .objectives import ObjectiveConfig
from .policy import PolicyConfig
from .selection import SelectionConfig
from .synthtask import TaskConfig
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = {"task": TaskConfig, "policy": PolicyConfig,
            "selection": SelectionConfig, "objective": ObjectiveConfig}


def camel(name):
    head, *rest = name.split("_")
    return head + "".join(w.upper() if w in ("r", "p") else w.capitalize() for w in rest)


def snake(name):
    return re.sub(r"(?<!^)([A-Z])", r"_\1", name).lower()


def _fields(cls):
    return {camel(f.name): f for f in dataclasses.fields(cls)}


def to_dict(config):
    """Fully materialised nested dict (every default written out)."""
    out = {}
    for key, f in _fields(TrainConfig).items():
        value = getattr(config, f.name)
        if f.name in SECTIONS:
            out[key] = {k: _plain(getattr(value, sf.name))
                        for k, sf in _fields(SECTIONS[f.name]).items()}
        else:
            out[key] = _plain(value)
    return out


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _coerce(cls_field, value, key):
    if isinstance(value, str) and cls_field.type in ("tuple", tuple):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if isinstance(value, list):
        return tuple(value)
    target = cls_field.default
    if isinstance(target, bool) and not isinstance(value, bool):
        raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
    if isinstance(target, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(target, int) and not isinstance(target, bool) and isinstance(value, float):
        if value != int(value):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return value


def from_dict(data):
    data = dict(data)
    kwargs = {}
    top = _fields(TrainConfig)
    for key, value in data.items():
        if key not in top:
            raise ConfigurationError(f"unknown config key {key!r}")
        f = top[key]
        if f.name in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"{key} must be a table")
            sub = _fields(SECTIONS[f.name])
            sub_kwargs = {}
            for skey, svalue in value.items():
                if skey not in sub:
                    raise ConfigurationError(f"unknown config key {key}.{skey!r}")
                sub_kwargs[sub[skey].name] = _coerce(sub[skey], svalue, f"{key}.{skey}")
            try:
                kwargs[f.name] = SECTIONS[f.name](**sub_kwargs)
            except TypeError as exc:
                raise ConfigurationError(f"{key}: {exc}") from exc
        else:
            kwargs[f.name] = _coerce(f, value, key)
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_file(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        if str(path).endswith(".json"):
            return json.loads(raw)
        return tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc


def parse_value(text):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(data, overrides):
    """Apply ``dotted.key=value`` strings to a nested config dict (copied)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = parse_value(text)
    return data


def load_config(path=None, overrides=()):
    data = load_file(path) if path else {}
    return from_dict(apply_overrides(data, overrides))
