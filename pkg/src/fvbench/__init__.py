"""Adversarial robustness evaluation for embedding-based face verification."""

__version__ = "0.1.0"
