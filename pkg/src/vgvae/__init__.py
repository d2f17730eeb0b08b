"""Variational sentence model with separate semantic and syntactic latents."""

__version__ = "0.1.0"
