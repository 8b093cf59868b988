"""Synthesis and end-to-end solving of arithmetic text CAPTCHAs."""

__version__ = "0.1.0"
