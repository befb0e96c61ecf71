"""Phase-aware spectro-temporal representations and CNN classifiers for
dysarthric speech detection."""

__version__ = "0.1.0"
