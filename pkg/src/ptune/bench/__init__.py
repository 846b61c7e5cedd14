"""Synthetic knowledge probing and few-shot benchmark."""
