"""Optimal-transport guided cross-modal MRI reconstruction at desk scale."""

__version__ = "0.1.0"
