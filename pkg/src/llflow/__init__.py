"""Conditional normalizing-flow low-light image enhancement, built on a
small numpy-backed reverse-mode autodiff engine."""

__version__ = "0.1.0"
