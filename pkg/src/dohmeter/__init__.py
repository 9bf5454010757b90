"""Measurement and characterization toolkit for DNS over HTTPS."""

__version__ = "0.1.0"
