"""Adversarial semantic-embedding networks for generalized zero-shot
recognition, with a synthetic attribute-rendered benchmark."""

__version__ = "0.1.0"
