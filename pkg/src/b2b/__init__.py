"""Product embeddings, relationship scores, bundle generation and bundle-response models."""

__version__ = "0.1.0"
