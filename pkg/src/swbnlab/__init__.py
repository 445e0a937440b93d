"""Stochastic whitening batch normalization laboratory."""

__version__ = "0.1.0"
