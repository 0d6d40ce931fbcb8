"""Differentiable-stack recurrent recognizers for context-free languages."""

__version__ = "0.1.0"
