"""Conditional diffusion sampling toolkit."""

__version__ = "0.1.0"
