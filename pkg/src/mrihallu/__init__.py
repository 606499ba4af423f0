"""Provoking and detecting hallucinations in learned MRI reconstruction."""

__version__ = "0.1.0"
