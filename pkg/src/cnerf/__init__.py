"""Conditional radiance field engine with scribble-driven local editing."""

__version__ = "0.1.0"
