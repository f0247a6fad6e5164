"""Volumetric shape descriptors from dense slice sequences."""

__version__ = "0.1.0"
