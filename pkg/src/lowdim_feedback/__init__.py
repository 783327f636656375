"""Low-dimensional feedback alignment: training engine and linear-theory lab."""

__version__ = "0.1.0"
