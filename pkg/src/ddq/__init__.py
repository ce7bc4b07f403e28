"""Differentiable dynamic quantization: learned levels, bitwidth gates and packed lookup inference."""

__version__ = "0.1.0"
