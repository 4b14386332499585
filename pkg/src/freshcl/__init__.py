"""Continual learning with fixed simplex ETF targets and a mixture of
ETF-projection experts routed per task."""

__version__ = "0.1.0"
