"""Desk-scale lexically constrained neural machine translation."""

__version__ = "0.1.0"
