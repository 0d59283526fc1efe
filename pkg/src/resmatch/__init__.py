"""Desk-scale dataset distillation by residual matching."""

__version__ = "0.1.0"
