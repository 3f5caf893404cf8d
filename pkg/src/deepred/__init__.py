"""Temporal interaction prediction with mutual recurrent encoders."""
__version__ = "0.1.0"
