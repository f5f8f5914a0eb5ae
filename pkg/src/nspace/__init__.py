"""Shared neural-space toolkit: one latent domain reused by imaging and vision heads."""

__version__ = "0.1.0"
