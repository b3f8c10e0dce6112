"""Hierarchical metrical structure analysis of multi-track symbolic music."""

__version__ = "0.1.0"
