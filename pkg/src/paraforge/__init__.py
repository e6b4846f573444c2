"""Mask-detection and breathing-signal pipelines built on numpy."""

__version__ = "0.1.0"
