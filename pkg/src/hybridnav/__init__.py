"""Hybrid aerial-ground navigation stack with a deterministic test simulator."""

__version__ = "0.1.0"
