"""Synthetic factorized conditional distributions, exact oracles, and small MLP experiments."""

__version__ = "0.1.0"
