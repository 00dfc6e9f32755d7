"""Joint keyword spotting and audio tagging with one multi-label model."""

__version__ = "0.1.0"
