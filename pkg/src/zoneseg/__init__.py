"""Volumetric U-net engine and experiment harness for prostate zone segmentation."""

__version__ = "0.1.0"
