"""Compression-robust watermarking for anchor-based Gaussian-splat scenes."""

__version__ = "0.1.0"
