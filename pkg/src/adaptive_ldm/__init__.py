"""Two-stage 3D latent diffusion for multi-modal volume translation."""

__version__ = "0.1.0"
