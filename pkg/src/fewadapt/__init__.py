"""Cross-domain few-shot self-training engine."""

__version__ = "0.1.0"
