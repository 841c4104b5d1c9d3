"""Pairwise rank-based M-estimation of parametric stable tail dependence functions."""

__version__ = "0.1.0"
