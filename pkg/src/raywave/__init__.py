"""Hybrid ray-wave simulation of refractive lenses with a diffractive element."""

__version__ = "0.1.0"
