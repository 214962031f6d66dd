"""Function-preserving width expansion of decoder-only transformers."""

__version__ = "0.1.0"
