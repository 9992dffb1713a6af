"""Finite-difference laboratory for the heat equation with an inverse-square potential:
spectra, Carleman weights, HUM null control and cutoff stabilization in three dimensions."""

__version__ = "0.1.0"
