"""Desk-scale retrieval-augmented biography generation with citations."""

__version__ = "0.1.0"
