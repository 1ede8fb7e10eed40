"""Multimodal pre-training over paired clinical text and diagnosis/medication codes."""

__version__ = "0.1.0"
