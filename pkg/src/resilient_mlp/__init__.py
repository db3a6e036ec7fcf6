"""Noise-resilient MLP training and approximate-hardware evaluation."""

__version__ = "0.1.0"
