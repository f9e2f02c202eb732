"""Two-party private waterfall matching with dual-sided DP intersection sizes."""

__version__ = "0.1.0"
