"""Multimodal-fusion end-to-end driving with a scene-understanding auxiliary task."""

__version__ = "0.1.0"
