"""Few-shot location classification with a Siamese embedder and latent mixup."""

__version__ = "0.1.0"
