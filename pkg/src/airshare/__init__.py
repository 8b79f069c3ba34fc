"""Market-share prediction and budget-constrained influence maximisation for
airline route networks."""

__version__ = "0.1.0"
