"""Trainable divide-and-conquer networks: recursive split/merge modules."""

__version__ = "0.1.0"
