"""Cellular meta-material simulation with composable learned energy surrogates."""

__version__ = "0.1.0"
