from __future__ import annotations

import dataclasses
from typing import Any, TypeVar

from .exceptions import ConfigError

T = TypeVar("T")


def from_mapping(cls: type[T], data: dict[str, Any] | None) -> T:
    """Build a config dataclass from a plain mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown field(s) {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def to_mapping(cfg) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def check_probability(name: str, value: float) -> None:
    require(isinstance(value, (int, float)) and 0.0 <= value <= 1.0, f"{name} must lie in [0, 1], got {value!r}")


def check_range(name: str, pair, lower: float = 0.0) -> None:
    require(len(pair) == 2 and lower <= pair[0] <= pair[1], f"{name} must be an ordered pair >= {lower}, got {pair!r}")
