"""Conditional variational graph autoencoder for molecular conformation generation."""

__version__ = "0.1.0"
