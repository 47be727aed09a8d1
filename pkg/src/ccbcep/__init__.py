"""Cardinality-constrained capacity expansion on congested networks."""

__version__ = "0.1.0"
