"""Retrieval-augmented clinical code prediction with co-trained text and hypergraph models."""

__version__ = "0.1.0"
