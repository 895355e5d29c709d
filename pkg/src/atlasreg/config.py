"""Key-value text configs.

One ``key = value`` pair per line; ``#`` starts a comment. Sequences are
written space- or comma-separated (``dims = 64 76 44``), booleans as
``true``/``false`` and an absent optional value as ``none``. Keys may repeat
only where a schema says so (``case`` in a manifest).
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, bad value or malformed line."""


def parse_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def read_pairs(path) -> list[tuple[str, str]]:
    return parse_pairs(Path(path).read_text(), str(path))


def _scalar(tp, text: str):
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise ConfigError(f"unsupported config type {tp}")


def coerce(tp, text: str):
    """Convert ``text`` to the annotated type ``tp``."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() == "none":
            return None
        return coerce(args[0], text)
    if origin is tuple:
        args = typing.get_args(tp)
        items = text.replace(",", " ").split()
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_scalar(args[0], it) for it in items)
        if len(items) != len(args):
            raise ConfigError(f"expected {len(args)} values, got {text!r}")
        return tuple(_scalar(a, it) for a, it in zip(args, items))
    try:
        return _scalar(tp, text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_fields(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def build(cls, pairs, base=None, ignore=()):
    """Instantiate dataclass ``cls`` from string pairs; unknown keys are rejected."""
    fields = config_fields(cls)
    kwargs = {}
    for key, value in pairs:
        if key in ignore:
            continue
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        try:
            kwargs[key] = coerce(fields[key], value)
        except (ConfigError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(obj, skip=()) -> str:
    """Render a dataclass instance in the same schema."""
    lines = []
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
