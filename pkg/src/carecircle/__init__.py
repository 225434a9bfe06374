"""Headless collective-care coordination engine."""

__version__ = "0.1.0"
