"""Semantic SLAM back-end: point, plane and quadric landmarks in one graph."""

__version__ = "0.1.0"
