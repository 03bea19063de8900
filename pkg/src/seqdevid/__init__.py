"""Device identification from packet sequences with from-scratch recurrent models."""

__version__ = "0.1.0"
