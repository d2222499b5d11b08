"""Masked image modeling with speckle-robust gradient targets for SAR imagery."""

__version__ = "0.1.0"
