"""Stereo visual localization with persistent map saving."""

__version__ = "0.1.0"
