"""Equivariant convolutional Q-networks for grid worlds, with training tools."""

__version__ = "0.1.0"
