"""Unsupervised highway anomaly detection with a structural-attention recurrent VAE."""

__version__ = "0.1.0"
