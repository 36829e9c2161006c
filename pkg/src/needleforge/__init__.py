"""Spatio-temporal force regression from OCT A-scan streams."""

__version__ = "0.1.0"
