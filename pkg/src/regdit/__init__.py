"""Pixel-space diffusion transformers with register and in-context tokens,
dual-stream blocks, flow-matching training and an analysis suite."""

__version__ = "0.1.0"
