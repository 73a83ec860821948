"""Numerical toolkit for degenerate Kolmogorov-type SDEs and their frozen Gaussian parametrix."""

__version__ = "0.1.0"
