"""Desk-scale neural style transfer: pyramid positional encoding, a
transformer stylizer, a tape-based autodiff core, and a human-rating
training service."""

__version__ = "0.1.0"
