"""Effective coefficients and macroscopic simulation for porous media with evolving spherical grains."""

__version__ = "0.1.0"
