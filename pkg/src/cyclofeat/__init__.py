"""Cyclic acoustic pattern synthesis, cyclostationary features and survey regression."""

__version__ = "0.1.0"
