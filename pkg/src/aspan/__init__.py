"""Detector-free image matching with uncertainty-adaptive attention spans."""

__version__ = "0.1.0"
