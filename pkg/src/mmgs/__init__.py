"""Hierarchical Gaussian-splat refinement for multi-human multi-object scenes."""

__version__ = "0.1.0"
