"""Multimodal point-cloud completion, score-based denoising and reconstruction metrics."""

__version__ = "0.1.0"
