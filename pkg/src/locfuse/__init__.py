"""Locality-aware prompt fusion for visual in-context learning."""

__version__ = "0.1.0"
