"""Satellite-feature augmented shellfish biotoxin forecasting."""

__version__ = "0.1.0"
