"""Flat ``key=value`` configuration files (``#`` starts a comment)."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from encrl.errors import ConfigError


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    return parse_lines(Path(path).read_text(encoding="utf-8"), str(path))


def parse_overrides(items) -> dict[str, str]:
    return parse_lines("\n".join(items or []), "--set")


def _coerce(value: str, annotation, key: str):
    origin = typing.get_origin(annotation)
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(annotation)):
        if value.lower() in ("", "none", "null"):
            return None
        annotation = args[0]
    try:
        if annotation is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if annotation is int:
            return int(value)
        if annotation is float:
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def apply_settings(obj, settings: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string ``settings`` coerced onto its fields."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in settings.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(value, hints[key], key)
    return dataclasses.replace(obj, **changes)


def format_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        lines.append(f"{f.name}={'' if value is None else value}")
    return "\n".join(lines) + "\n"
