"""Dynamic VM type selection for autoscaled application servers."""

__version__ = "0.1.0"
