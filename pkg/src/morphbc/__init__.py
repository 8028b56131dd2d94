"""Few-shot behavior cloning across heterogeneous planar robot morphologies."""

__version__ = "0.1.0"
