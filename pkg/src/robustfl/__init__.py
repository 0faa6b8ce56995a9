"""Robust feature learning for multi-index models with two-layer networks."""

__version__ = "0.1.0"
