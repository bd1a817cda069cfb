"""Federated short-term load forecasting with personalization layers."""

__version__ = "0.1.0"
