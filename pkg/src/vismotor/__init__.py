"""Shared visuomotor multi-task model on a synthetic block world."""

__version__ = "0.1.0"
