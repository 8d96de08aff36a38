"""Transformer-based VAE for sequence-level anomaly detection in multivariate test-bench time series."""

__version__ = "0.1.0"
