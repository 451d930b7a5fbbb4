"""Low-rank adaptation of a small decoder-only probabilistic forecaster."""

__version__ = "0.1.0"
