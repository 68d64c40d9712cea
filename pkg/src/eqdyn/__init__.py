"""Symmetry-equivariant convolutional forecasters for 2D dynamics."""

__version__ = "0.1.0"
