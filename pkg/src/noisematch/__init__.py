"""Noise-robust coarse-to-fine image matching with learned outlier removal."""

__version__ = "0.1.0"
