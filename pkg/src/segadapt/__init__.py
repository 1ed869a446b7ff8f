"""Unsupervised domain adaptation for aerial semantic segmentation via cycle-consistent image translation."""

__version__ = "0.1.0"
