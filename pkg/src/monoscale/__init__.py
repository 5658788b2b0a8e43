"""Learned absolute inter-frame distance estimation for monocular cameras."""

__version__ = "0.1.0"
