"""Zero-shot object navigation by semantic similarity, in synthetic grid worlds."""

__version__ = "0.1.0"
