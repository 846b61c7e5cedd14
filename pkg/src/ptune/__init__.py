"""Desk-scale P-tuning: continuous prompts for tiny transformer LMs."""

__version__ = "0.1.0"
