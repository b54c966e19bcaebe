"""Feedback equilibria of constrained linear-quadratic games by best-response dynamics."""

__version__ = "0.1.0"
