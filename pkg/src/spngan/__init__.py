"""Self pixel-wise normalization layers and a small numpy GAN training stack."""

__version__ = "0.1.0"
