"""Deterministic flight-control CPS simulator with multilevel runtime monitors."""

__version__ = "0.1.0"
