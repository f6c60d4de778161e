"""Hybrid Bayesian 3D CNN: post-hoc Gaussian head, Monte-Carlo uncertainty,
threshold rejection and integrated-gradients masks."""

__version__ = "0.1.0"
