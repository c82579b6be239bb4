"""Aspect-aware topic modelling and aspect-aware latent factor rating prediction."""

__version__ = "0.1.0"
