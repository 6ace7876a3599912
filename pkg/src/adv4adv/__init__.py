"""Adversarial training as adversarial domain adaptation (Adv-4-Adv)."""

__version__ = "0.1.0"
