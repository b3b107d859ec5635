"""Hadamard-product low-rank weight factorization for communication-efficient federated learning."""

__version__ = "0.1.0"
