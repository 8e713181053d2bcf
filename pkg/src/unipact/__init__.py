"""Multimodal prognostic question answering over ECG signals and structured EHR text."""

__version__ = "0.1.0"
