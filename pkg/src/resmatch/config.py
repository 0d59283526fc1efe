"""Flat ``key = value`` config files for DistillConfig.

One assignment per line; ``#`` starts a comment; keys are DistillConfig field
names. Values are typed by the field: ints, floats (``repr`` round-trips),
booleans (``true``/``false``), and bare strings.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .distiller import DistillConfig
from .errors import ConfigError

_TYPES = {f.name: f.type for f in fields(DistillConfig)}


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from e
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> DistillConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return DistillConfig(**values)


def serialize_config(cfg: DistillConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_config(path: str | Path) -> DistillConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from e
    return parse_config(text)


def save_config(cfg: DistillConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(serialize_config(cfg))
    return path
