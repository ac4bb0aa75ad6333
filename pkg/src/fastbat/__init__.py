"""Adversarial training as bi-level optimization, at desk scale."""

__version__ = "0.1.0"
