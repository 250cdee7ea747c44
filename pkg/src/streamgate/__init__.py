"""Streaming caption engine gated on response-silence verification."""

__version__ = "0.1.0"
