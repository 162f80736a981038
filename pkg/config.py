#!/usr/bin/env python3
"""Centralized configuration for unilm.

Environment-driven defaults live on ``Config``; file-backed settings
(server settings, routing policy) are dataclasses with ``from_json``.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional

from errors import ConfigError


LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


class Config:
    """Centralized configuration management."""

    # Remote endpoint used by the orchestrator when none is passed explicitly
    SERVER_URL = os.environ.get("UNILM_SERVER", "")

    # Artifacts
    HOME = Path(os.environ.get("UNILM_HOME", str(Path.home() / ".unilm")))

    LOG_LEVEL = os.environ.get("UNILM_LOG_LEVEL", "WARNING")

    # Server settings
    HOST = os.environ.get("UNILM_HOST", "127.0.0.1")
    PORT = int(os.environ.get("UNILM_PORT", "8088"))
    WORKERS = int(os.environ.get("UNILM_WORKERS", "2"))
    MAX_ADAPTER_BYTES = int(os.environ.get("UNILM_MAX_ADAPTER_BYTES", str(128 * 1024 * 1024)))
    MAX_REQUEST_BYTES = int(os.environ.get("UNILM_MAX_REQUEST_BYTES", str(1024 * 1024)))
    QUEUE_TIMEOUT_S = float(os.environ.get("UNILM_QUEUE_TIMEOUT_S", "30"))

    # Orchestrator settings
    HEALTH_TTL_MS = int(os.environ.get("UNILM_HEALTH_TTL_MS", "5000"))
    REMOTE_TIMEOUT_S = float(os.environ.get("UNILM_REMOTE_TIMEOUT_S", "30"))
    PROBE_TIMEOUT_S = float(os.environ.get("UNILM_PROBE_TIMEOUT_S", "2"))


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for CLI and server entry points."""
    name = (level or Config.LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING), format=LOG_FORMAT)


def load_json_object(path: Path) -> Dict[str, Any]:
    """Read a JSON object from disk, raising ConfigError on anything else."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def check_known_keys(cls, data: Dict[str, Any], source: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")


@dataclass
class ServerSettings:
    """Listen address and capacity limits for ``server.serve``."""
    host: str = Config.HOST
    port: int = Config.PORT
    workers: int = Config.WORKERS
    max_adapter_bytes: int = Config.MAX_ADAPTER_BYTES
    max_request_bytes: int = Config.MAX_REQUEST_BYTES
    queue_timeout_s: float = Config.QUEUE_TIMEOUT_S

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.max_adapter_bytes < 1:
            raise ConfigError("max_adapter_bytes must be >= 1")
        if self.max_request_bytes < 1:
            raise ConfigError("max_request_bytes must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, path: Path) -> "ServerSettings":
        data = load_json_object(path)
        check_known_keys(cls, data, str(path))
        return cls(**data)
