"""Procedure-sequence verification: embed step-structured videos and compare them."""

__version__ = "0.1.0"
