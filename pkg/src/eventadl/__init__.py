"""Zero-shot activity recognition over smart-home sensor event streams."""

__version__ = "0.1.0"
