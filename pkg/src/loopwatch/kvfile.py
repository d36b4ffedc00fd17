"""Plain ``key = value`` text files used for configs and metrics."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_kv(path, items: dict) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _coerce(text: str, default):
    if isinstance(default, bool):
        return parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if default and isinstance(default[0], int) and not isinstance(default[0], bool):
            return tuple(int(s) for s in items)
        return tuple(float(s) for s in items)
    return text


def dataclass_from_kv(cls, items: dict[str, str]):
    """Build dataclass ``cls`` from string items, coercing by field defaults."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(items) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    template = cls()
    kwargs = {}
    for key, text in items.items():
        try:
            kwargs[key] = _coerce(text, getattr(template, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
    return cls(**kwargs)


def dataclass_to_kv(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
