"""Kernel MMD-CUSUM change detection for dependent data streams."""

__version__ = "0.1.0"
