"""Pixel-rendered source representations for multilingual translation."""

__version__ = "0.1.0"
