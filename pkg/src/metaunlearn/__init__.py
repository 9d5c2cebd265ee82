"""Toy-scale laboratory for attack-resistant concept unlearning in conditional diffusion models."""

__version__ = "0.1.0"
