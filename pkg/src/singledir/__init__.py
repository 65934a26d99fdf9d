"""Measure how much a network relies on single directions in activation space."""

__version__ = "0.1.0"
