"""Dyadic point-line incidence machinery."""

__version__ = "0.1.0"
