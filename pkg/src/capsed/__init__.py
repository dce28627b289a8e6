"""Text-guided sound event detection on synthetic audio scenes."""

__version__ = "0.1.0"
