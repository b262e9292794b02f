"""Distributionally robust model predictive control toolkit."""

__version__ = "0.1.0"
