"""Latent-subgroup shift adaptation with recognition-parametrised factors."""

__version__ = "0.1.0"
