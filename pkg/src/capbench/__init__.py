"""Desk-scale workbench for probing self-supervised Conformer speech encoders."""

__version__ = "0.1.0"
