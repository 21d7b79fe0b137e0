"""Diffusion-based clothes-changing data expansion and retrieval on a synthetic re-id benchmark."""

__version__ = "0.1.0"
