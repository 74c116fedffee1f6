"""Supervised contrastive multiple instance learning on synthetic bags."""

__version__ = "0.1.0"
