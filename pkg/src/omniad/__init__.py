"""Multi-class anomaly detection via global/local feature reconstruction."""

__version__ = "0.1.0"
