"""Desk-scale multi-modal speech recognition lab on symbolic equation data."""

__version__ = "0.1.0"
