"""Toy virtual-machine protection pipeline with protection-aware embeddings."""

__version__ = "0.1.0"
