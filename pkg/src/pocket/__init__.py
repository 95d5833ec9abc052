"""Manifest-driven defense agents behind a typed enforcement boundary."""

__version__ = "0.1.0"
