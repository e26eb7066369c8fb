"""Joint structure learning and stochastic population dynamics from snapshot data."""

__version__ = "0.1.0"
