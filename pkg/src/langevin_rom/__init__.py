"""Langevin reduced-order model calibration from trajectory data."""

__version__ = "0.1.0"
