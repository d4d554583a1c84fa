"""``key = value`` config files and dataclass coercion."""
from __future__ import annotations

import dataclasses
import types
import typing

from .errors import ConfigError, ParseError


def parse_kv(text: str, path=None) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path, lineno)
        out[key] = value
    return out


def load_kv(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), path)


def dump_kv(items: dict) -> str:
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in items.items())


def _coerce(value: str, hint, key: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value in ("", "none", "None"):
            return None
        hint = args[0]
    try:
        if hint is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {hint.__name__}") from None
    return value


def from_mapping(cls, values: dict[str, str], base=None, strict: bool = True):
    """Build dataclass ``cls`` from string values, starting from ``base`` (or defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {', '.join(sorted(unknown))}")
    kwargs = {} if base is None else dataclasses.asdict(base)
    for key, value in values.items():
        if key in names:
            kwargs[key] = _coerce(value, hints[key], key) if isinstance(value, str) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def to_mapping(obj) -> dict[str, str]:
    return {k: ("" if v is None else str(v)) for k, v in dataclasses.asdict(obj).items()}
