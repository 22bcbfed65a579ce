"""Cardinality estimation with a downsized score-based diffusion model."""

__version__ = "0.1.0"
