"""Decomposition of the urban wage growth premium on matched employer-employee panels."""

__version__ = "0.1.0"
