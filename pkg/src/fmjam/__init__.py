"""Flat-manifold recurrent VAE for symbolic music, with live jam service."""

__version__ = "0.1.0"
