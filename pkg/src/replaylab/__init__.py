"""Desk-scale continual-learning lab for soft-label segmentation with experience replay."""

__version__ = "0.1.0"
