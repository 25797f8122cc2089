"""Topological affordance graphs from egocentric video embeddings."""

__version__ = "0.1.0"
