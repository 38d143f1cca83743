"""Flat ``key = value`` config files with environment overrides.

Lines starting with ``#`` are comments. Any key can be overridden by an
environment variable ``MORPHINE_RL_<KEY>`` (upper case); command-line flags
take precedence over both.
"""

from __future__ import annotations

import os
from pathlib import Path

ENV_PREFIX = "MORPHINE_RL_"


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        cfg[key.lower()] = value
    return cfg


def load_config(path: str | Path | None, environ: dict[str, str] | None = None) -> dict[str, str]:
    cfg = parse_config(Path(path).read_text()) if path else {}
    env = os.environ if environ is None else environ
    for name, value in env.items():
        if name.startswith(ENV_PREFIX) and len(name) > len(ENV_PREFIX):
            cfg[name[len(ENV_PREFIX):].lower()] = value
    return cfg


def require(cfg: dict, key: str, cast=str):
    if key not in cfg or cfg[key] in (None, ""):
        raise ConfigError(f"missing config key: {key}")
    try:
        return cast(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from None
