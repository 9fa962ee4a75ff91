"""Collector configuration: one declarative JSON file plus MEDLOG_* overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from datetime import timedelta
from pathlib import Path
from typing import Any, Mapping

from .store import RetentionPolicy


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CollectorConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8400
    data_dir: str = "./medlog-data"
    policy_file: str | None = None
    orphan_ttl_hours: float = 72.0
    upgrade_buffer_seconds: float = 60.0
    summary_ttl_days: float = 3650.0
    content_ttl_days: float = 365.0
    artifact_ttl_days: float = 90.0
    durability: str = "batch"

    @property
    def orphan_ttl(self) -> timedelta:
        return timedelta(hours=self.orphan_ttl_hours)

    def retention(self) -> RetentionPolicy:
        return RetentionPolicy(
            summary_ttl=timedelta(days=self.summary_ttl_days),
            content_ttl=timedelta(days=self.content_ttl_days),
            artifact_ttl=timedelta(days=self.artifact_ttl_days),
        )


_FILE_KEYS = {
    "listen": str,
    "data_dir": str,
    "policy_file": str,
    "orphan_ttl_hours": float,
    "upgrade_buffer_seconds": float,
    "summary_ttl_days": float,
    "content_ttl_days": float,
    "artifact_ttl_days": float,
    "durability": str,
}


def apply_listen(config: CollectorConfig, listen: str) -> CollectorConfig:
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"listen must be host:port, got {listen!r}")
    return replace(config, listen_host=host, listen_port=int(port))


def load_config(
    path: str | Path | None = None, env: Mapping[str, str] | None = None
) -> CollectorConfig:
    """Read the config file (when given), then apply environment overrides."""
    env = os.environ if env is None else env
    config = CollectorConfig()

    if path is not None:
        try:
            obj: dict[str, Any] = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(obj) - set(_FILE_KEYS)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        for key, cast in _FILE_KEYS.items():
            if key not in obj:
                continue
            value = obj[key]
            try:
                value = cast(value)
            except (TypeError, ValueError):
                raise ConfigError(f"config field {key!r} has the wrong type") from None
            if key == "listen":
                config = apply_listen(config, value)
            else:
                config = replace(config, **{key: value})

    for key, cast in _FILE_KEYS.items():
        env_key = f"MEDLOG_{key.upper()}"
        if env_key not in env:
            continue
        try:
            value = cast(env[env_key])
        except (TypeError, ValueError):
            raise ConfigError(f"{env_key} has the wrong format") from None
        if key == "listen":
            config = apply_listen(config, value)
        else:
            config = replace(config, **{key: value})

    if config.durability not in ("always", "batch", "never"):
        raise ConfigError(f"unknown durability mode {config.durability!r}")
    return config
