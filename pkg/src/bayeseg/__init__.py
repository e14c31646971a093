"""Bayesian encoder-decoder segmentation with Monte Carlo dropout."""

__version__ = "0.1.0"
