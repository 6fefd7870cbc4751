"""Line-oriented config files with dotted keys.

Format: one `key = value` assignment per line, keys namespaced with dots
(`eqrnn.loss = asymmetric-huber`). `#` starts a comment, blank lines are
skipped. Values stay strings until a typed getter is asked for them.

A canonical serialization (sorted keys) feeds the sha256 digest that binds
checkpoints to the config that produced them.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .exceptions import ConfigError

Config = dict[str, str]


def parse_config_text(text: str) -> Config:
    cfg: Config = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        cfg[key] = value
    return cfg


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def dump_config(cfg: Config) -> str:
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n" if lines else ""


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(dump_config(cfg))


def config_digest(cfg: Config) -> bytes:
    """sha256 over the canonical serialization; 32 bytes."""
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).digest()


def _missing(key: str):
    raise ConfigError(f"missing config key: {key!r}")


_SENTINEL = object()


def get_str(cfg: Config, key: str, default=_SENTINEL) -> str:
    if key in cfg:
        return cfg[key]
    if default is _SENTINEL:
        _missing(key)
    return default


def get_int(cfg: Config, key: str, default=_SENTINEL) -> int:
    if key not in cfg:
        if default is _SENTINEL:
            _missing(key)
        return default
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"{key}: expected integer, got {cfg[key]!r}") from None


def get_float(cfg: Config, key: str, default=_SENTINEL) -> float:
    if key not in cfg:
        if default is _SENTINEL:
            _missing(key)
        return default
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"{key}: expected number, got {cfg[key]!r}") from None


def get_bool(cfg: Config, key: str, default=_SENTINEL) -> bool:
    if key not in cfg:
        if default is _SENTINEL:
            _missing(key)
        return default
    value = cfg[key].lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected boolean, got {cfg[key]!r}")


def get_floats(cfg: Config, key: str, default=_SENTINEL) -> list[float]:
    """Comma-separated list of numbers."""
    if key not in cfg:
        if default is _SENTINEL:
            _missing(key)
        return default
    raw = cfg[key].strip()
    if not raw:
        return []
    try:
        return [float(part) for part in raw.split(",")]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, "
                          f"got {cfg[key]!r}") from None


def get_ints(cfg: Config, key: str, default=_SENTINEL) -> list[int]:
    if key not in cfg:
        if default is _SENTINEL:
            _missing(key)
        return default
    raw = cfg[key].strip()
    if not raw:
        return []
    try:
        return [int(part) for part in raw.split(",")]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, "
                          f"got {cfg[key]!r}") from None
