"""Continuous ensemble forecasting with lead-time-conditioned diffusion models."""

__version__ = "0.1.0"
