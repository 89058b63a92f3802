"""Thin-structure segmentation with an adversarially trained generator, semantic decoder and Hough loss."""

__version__ = "0.1.0"
