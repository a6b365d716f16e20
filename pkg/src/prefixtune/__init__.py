"""Prefix-tuning and its baselines on a small numpy transformer."""

__version__ = "0.1.0"
