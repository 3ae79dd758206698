"""Incident response as a decomposed partially observed stochastic game."""

__version__ = "0.1.0"
