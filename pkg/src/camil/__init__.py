"""Attention-MIL regression vs. classification for continuous biomarkers."""

__version__ = "0.1.0"
