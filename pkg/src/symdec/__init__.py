"""Symmetry detection engine: equivariant decoding of prompt-conditioned patch tokens."""

__version__ = "0.1.0"
