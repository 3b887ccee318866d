"""Numerical splitting of degenerate Laplacian eigenvalues on polygons."""

__version__ = "0.1.0"
