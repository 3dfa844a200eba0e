"""Advantage reward modeling on a synthetic long-horizon task."""

__version__ = "0.1.0"
