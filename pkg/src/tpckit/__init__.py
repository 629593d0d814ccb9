"""Temporal pointwise convolution networks for remaining length-of-stay prediction."""

__version__ = "0.1.0"
