"""Frequency-domain adversarial attacks and DFT-autoencoder detection."""

__version__ = "0.1.0"
