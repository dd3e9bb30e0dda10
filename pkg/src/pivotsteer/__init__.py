"""Test-time activation steering for multilingual evaluation metrics."""

__version__ = "0.1.0"
