"""Reach-avoid value functions on grids and the adaptive safety filters built on them."""

__version__ = "0.1.0"
