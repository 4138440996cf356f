"""Local volatility inside a one-factor HJM model under the small-vol approximation."""

__version__ = "0.1.0"
