"""Stability-certified Koopman observer toolkit."""

__version__ = "0.1.0"
