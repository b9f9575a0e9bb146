"""Tri-modal (dense, lexical, multi-vector) retrieval encoder with two-phase training."""

__version__ = "0.1.0"
