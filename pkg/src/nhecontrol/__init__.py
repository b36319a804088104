"""Bilinear control of the nonlinear heat equation on the torus."""

__version__ = "0.1.0"
