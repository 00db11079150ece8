"""Recurrent contextual memory for document-level encoder-decoder translation."""

__version__ = "0.1.0"
