"""Dst index forecasting with a from-scratch transformer and Monte-Carlo uncertainty."""

__version__ = "0.1.0"
