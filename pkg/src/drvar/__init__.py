"""Dimension-reducible vector autoregressions."""

__version__ = "0.1.0"
