"""Robust mean-field actor-critic with a tabular state-adversarial game verifier."""

__version__ = "0.1.0"

from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]
