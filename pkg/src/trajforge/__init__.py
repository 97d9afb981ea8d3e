"""Desk-scale urban mobility trajectory generation with a two-phase training pipeline."""

__version__ = "0.1.0"
