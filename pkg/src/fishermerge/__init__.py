"""Mask-node Fisher-weighted merging of transformer encoders."""
__version__ = "0.1.0"
