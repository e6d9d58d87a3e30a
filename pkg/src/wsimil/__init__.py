"""Attention-based multiple-instance learning for very large images."""

__version__ = "0.1.0"
