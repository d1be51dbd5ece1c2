"""Boundary-aware serialized output training, at desk scale."""

__version__ = "0.1.0"
