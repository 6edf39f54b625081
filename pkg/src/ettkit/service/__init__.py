"""HTTP service wrapping the estimation pipeline."""

from .app import create_app

__all__ = ["create_app"]
