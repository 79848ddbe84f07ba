"""Building-to-building flow estimation from campus WiFi connection logs."""

__version__ = "0.1.0"
