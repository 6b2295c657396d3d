"""Functionally modularized temporal filtering for robust semantic segmentation."""

__version__ = "0.1.0"
