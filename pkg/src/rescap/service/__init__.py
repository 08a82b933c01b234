"""HTTP service for the annotation loop and a thin wrapper over core ops."""

from .app import create_app

__all__ = ["create_app"]
