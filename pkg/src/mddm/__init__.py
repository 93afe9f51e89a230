"""Multi-view discriminative network seeding a truncated conditional diffusion enhancer."""

__version__ = "0.1.0"
