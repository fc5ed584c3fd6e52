"""Semi- and self-supervised semantic segmentation for microscopy images."""

__version__ = "0.1.0"
