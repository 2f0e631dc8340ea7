"""Paired image-to-image translation with conditional adversarial networks, on numpy."""

__version__ = "0.1.0"
