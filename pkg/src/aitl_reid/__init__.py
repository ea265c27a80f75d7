"""Attribute-aware metric learning for video person re-identification."""

__version__ = "0.1.0"
