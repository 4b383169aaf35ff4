"""Segment-wise false positive / false negative monitoring for semantic segmentation."""

__version__ = "0.1.0"
