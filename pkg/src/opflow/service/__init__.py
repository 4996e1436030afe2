"""HTTP service wrapping the engine: one RunManager per data directory."""

from .app import create_app
from .manager import RunManager

__all__ = ["create_app", "RunManager"]
