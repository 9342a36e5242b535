"""Streaming model merging with FLOPs accounting and a synthetic benchmark."""

__version__ = "0.1.0"
