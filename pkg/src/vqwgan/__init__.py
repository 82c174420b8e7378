"""Hybrid VAE / quantum Wasserstein GAN with exact statevector simulation."""

__version__ = "0.1.0"
