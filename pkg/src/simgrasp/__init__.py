"""Similarity-based grasp transfer for partially observed objects."""

__version__ = "0.1.0"
