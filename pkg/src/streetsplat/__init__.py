"""Sparse-view street-scene Gaussian splatting with guided pseudo-view regularization."""

__version__ = "0.1.0"
