"""Numerical laboratory for the Sine-beta process and the tridiagonal beta-ensemble."""

__version__ = "0.1.0"
