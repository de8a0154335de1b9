"""Cluster admission control with moment-based look-ahead policies."""

__version__ = "0.1.0"
