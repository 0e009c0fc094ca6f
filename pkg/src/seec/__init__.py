"""Segmentation-assisted multi-entropy-model lossless image codec."""

__version__ = "0.1.0"
