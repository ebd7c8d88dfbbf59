"""Desk-scale laboratory for backdoor attacks on object detectors."""

__version__ = "0.1.0"
