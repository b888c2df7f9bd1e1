"""Draft-model training for speculative decoding at desk scale."""

__version__ = "0.1.0"
