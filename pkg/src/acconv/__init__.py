"""Desk-scale PPG-to-mel accent conversion lab."""

__version__ = "0.1.0"
