"""Desk-scale multimodal dialog generator with pointer-generator decoding."""

__version__ = "0.1.0"
