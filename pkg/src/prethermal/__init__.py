"""Numerical laboratory for prethermalization under quasi-periodic driving."""

__version__ = "0.1.0"
