"""Volume-sorted conformal prediction regions for multi-target regression."""

__version__ = "0.1.0"
