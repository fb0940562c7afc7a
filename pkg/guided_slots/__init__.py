"""Guided slot attention: object-centric slots steered by diffusion pseudo masks."""

__version__ = "0.1.0"
