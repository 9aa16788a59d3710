"""Multimodal graph-based classification of esophageal swallow events."""

__version__ = "0.1.0"
