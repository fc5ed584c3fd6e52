"""Flat ``key = value`` configuration files.

Keys are :class:`~semiseg.train.PipelineConfig` field names; augmentation
policies use dotted keys (``weak.scale_range``, ``weak.rot_range``,
``weak.flip_prob``, ``strong.n_ops``, ``strong.magnitude``). Tuples are
comma-separated, ``none`` clears optional values, ``#`` starts a comment.
Unknown keys are a configuration error.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

from .augment import StrongPolicy, WeakPolicy
from .train import ConfigError, PipelineConfig

NESTED = {"weak": WeakPolicy, "strong": StrongPolicy}


def parse_flat(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _convert(raw: str, default: Any, key: str):
    if raw.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], str):
                return tuple(parts)
            return tuple(float(p) for p in parts)
        if default is None:
            return int(raw) if raw.lstrip("-").isdigit() else float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def config_from_flat(values: Mapping[str, str], base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {name: {} for name in NESTED}
    fields = {f.name for f in dataclasses.fields(base)}
    for key, raw in values.items():
        head, _, sub = key.partition(".")
        if head in NESTED and sub:
            policy = getattr(base, head)
            if sub not in {f.name for f in dataclasses.fields(policy)}:
                raise ConfigError(f"unknown config key {key!r}")
            nested[head][sub] = _convert(raw, getattr(policy, sub), key)
        elif key in fields and key not in NESTED:
            top[key] = _convert(raw, getattr(base, key), key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for name, changes in nested.items():
        if changes:
            try:
                top[name] = dataclasses.replace(getattr(base, name), **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
    try:
        return dataclasses.replace(base, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_flat(cfg: PipelineConfig) -> str:
    lines = []

    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return "none" if v is None else str(v)

    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in NESTED:
            for sf in dataclasses.fields(value):
                lines.append(f"{f.name}.{sf.name} = {fmt(getattr(value, sf.name))}")
        else:
            lines.append(f"{f.name} = {fmt(value)}")
    return "\n".join(lines) + "\n"


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_flat(parse_flat(text), base)
