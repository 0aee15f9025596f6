"""Private federated learning for on-device app selection."""

__version__ = "0.1.0"
