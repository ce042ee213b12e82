"""Regularized (1,p)-Laplace flow: solver, truncations and regularity diagnostics."""

__version__ = "0.1.0"
