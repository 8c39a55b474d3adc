"""Conditional diffusion for synthesising missing MRI sequences from any available subset."""

__version__ = "0.1.0"
