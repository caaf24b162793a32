"""Curvature-regularized VAE for volumetric reconstruction from sparse depth."""

__version__ = "0.1.0"
