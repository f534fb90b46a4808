"""Desk-scale MRNet: SAM-fused U-Net translation with sequential mask correction."""

__version__ = "0.1.0"
