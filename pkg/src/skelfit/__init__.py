"""Articulated skeleton and shape reconstruction from silhouette/flow video."""

__version__ = "0.1.0"
