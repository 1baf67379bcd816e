"""Masked longitudinal latent diffusion for synthetic fundus sequences.

The package is a numpy library: a small reverse-mode autodiff engine, a
space-to-depth latent codec, a DDPM scheduler, time-aligned visit masks, a
sequence denoiser with temporal attention, a procedural fundus renderer,
image metrics and a command-line harness (``python -m longidiff``).
"""

__version__ = "0.1.0"
