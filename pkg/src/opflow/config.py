"""Where opflow keeps its data and how clients find the service."""

from __future__ import annotations

import os
from pathlib import Path

HOME_ENV = "OPFLOW_HOME"
SERVER_ENV = "OPFLOW_SERVER"

DEFAULT_SERVER = "http://127.0.0.1:8267"


def opflow_home(override: str | Path | None = None) -> Path:
    """Resolve the data directory: explicit arg, $OPFLOW_HOME, or ~/.opflow."""
    if override is not None:
        return Path(override).expanduser()
    env = os.environ.get(HOME_ENV)
    if env:
        return Path(env).expanduser()
    return Path.home() / ".opflow"


def server_url(override: str | None = None) -> str:
    """Resolve the service base URL: explicit arg, $OPFLOW_SERVER, or default."""
    if override:
        return override.rstrip("/")
    env = os.environ.get(SERVER_ENV)
    if env:
        return env.rstrip("/")
    return DEFAULT_SERVER
