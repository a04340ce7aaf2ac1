"""Partially-supervised multi-organ segmentation with cross-set augmentation
and prototype-based distribution alignment."""

__version__ = "0.1.0"
