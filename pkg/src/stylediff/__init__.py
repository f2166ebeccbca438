"""Desk-scale stylized text-to-image diffusion lab."""

__version__ = "0.1.0"
