"""Hybrid Mamba + Transformer next-item recommender, built on a small numpy autodiff."""

__version__ = "0.1.0"
