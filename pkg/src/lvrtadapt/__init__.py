"""Voltage-security tools for grids with trip-prone renewable generation."""

__version__ = "0.1.0"
