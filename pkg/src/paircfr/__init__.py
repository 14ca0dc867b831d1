"""Contrastive regularisation for training on counterfactually augmented data."""

__version__ = "0.1.0"
