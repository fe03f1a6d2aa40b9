"""graytrain: a multi-label grayscale-image training engine and benchmark."""

__version__ = "0.1.0"
