"""Denoising with cross-model agreement for noisy binary and multi-class labels."""
__version__ = "0.1.0"
