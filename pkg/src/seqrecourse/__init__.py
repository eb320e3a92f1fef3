"""Minimum-cost action sequences that flip a binary neural classifier."""

__version__ = "0.1.0"
