"""Sparse variational GPs with invertible marginal flow transformations."""

__version__ = "0.1.0"
