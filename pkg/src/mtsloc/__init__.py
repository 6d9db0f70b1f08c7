"""Transformer-based anomaly detection and per-series localization for multivariate time series."""

__version__ = "0.1.0"
