"""Concentration-based auxin transport on static cell graphs."""

__version__ = "0.1.0"
