"""Desk-scale heterogeneous multi-agent BEV collaborative perception."""

__version__ = "0.1.0"
