"""Diverse face inpainting via style-space perturbation and region-normalised decoding."""

__version__ = "0.1.0"
