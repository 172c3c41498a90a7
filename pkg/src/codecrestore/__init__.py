"""Prompt-expert latent diffusion for restoring codec-compressed images."""

__version__ = "0.1.0"
