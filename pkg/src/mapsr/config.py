"""Dotted ``key = value`` configuration.

A config file holds one assignment per line::

    # comments and blank lines are ignored
    chip_size = 448
    graph.k = 100
    upsample.mode = attention

Keys address (nested) dataclass fields. Values are coerced to the type of
the field's current value.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def coerce(value: str, current: Any) -> Any:
    if isinstance(current, bool):
        v = value.lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        try:
            return int(value)
        except ValueError:
            if value == "full":
                return value
            raise ConfigError(f"expected an integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"expected a number, got {value!r}") from None
    if value.lower() in ("", "none"):
        return None
    return value


def apply_overrides(obj, overrides: Mapping[str, str]):
    """Return a copy of dataclass ``obj`` with dotted ``overrides`` applied."""
    nested: dict[str, dict[str, str]] = {}
    direct: dict[str, Any] = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, head)
        if rest:
            if not dataclasses.is_dataclass(current):
                raise ConfigError(f"{head!r} has no sub-keys (got {key!r})")
            nested.setdefault(head, {})[rest] = value
        elif dataclasses.is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, not a value")
        else:
            direct[head] = value if not isinstance(value, str) else coerce(value, current)
    for head, sub in nested.items():
        direct[head] = apply_overrides(getattr(obj, head), sub)
    return dataclasses.replace(obj, **direct)


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = v
    return out


def split_dotted_args(argv: list[str]) -> dict[str, str]:
    """Collect ``--a.b value`` / ``--a.b=value`` pairs from leftover CLI args."""
    out, i = {}, 0
    while i < len(argv):
        arg = argv[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(argv):
                raise ConfigError(f"missing value for {arg}")
            value = argv[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out
