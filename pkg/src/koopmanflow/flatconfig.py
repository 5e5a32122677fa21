"""Flat key=value config text: one assignment per line, '#' comments."""

from __future__ import annotations

import dataclasses

from .errors import ConfigError

_SCALARS = {"int": int, "float": float, "str": str, "bool": bool}


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(values: dict) -> str:
    return "\n".join(f"{k}={values[k]}" for k in values) + "\n"


def _coerce(ann, raw: str):
    if isinstance(ann, str):
        if ann.startswith("tuple"):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        ann = _SCALARS.get(ann, str)
    if ann is bool:
        low = raw.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as bool")
    return ann(raw)


def dataclass_from_kv(cls, values: dict[str, str]):
    """Build a dataclass from flat keys, ignoring keys it does not own."""
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key in fields:
            kwargs[key] = _coerce(fields[key], raw)
    return cls(**kwargs)


def dataclass_to_kv(obj) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        out[f.name] = str(value)
    return out
