"""Frozen-backbone embedding export into the patchlens container format."""

__version__ = "0.1.0"
