"""Desk-scale continual pretraining of a byte-level language model with EWC, SI and LwF."""

__version__ = "0.1.0"
