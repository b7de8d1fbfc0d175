"""Graph neural networks trained on growing graphs sampled from a graphon."""

__version__ = "0.1.0"
